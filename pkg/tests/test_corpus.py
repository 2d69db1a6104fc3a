"""Corpus data model, feature format, manifest validation, and generator."""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcmr.corpus import (
    CorpusError,
    FrameSpan,
    QueryRecord,
    SubtitleSpan,
    VideoRecord,
    align_frames_to_subtitles,
    generate_synthetic_corpus,
    load_manifest,
    read_features,
    rebuild_oracle,
    save_manifest,
    write_features,
)


# ---------------------------------------------------------------------------
# Feature file format
# ---------------------------------------------------------------------------


class TestFeatureFormat:
    def test_round_trip_exact(self, tmp_path):
        mat = np.array([[1.5, -2.25], [0.0, 3.0], [1e-7, -1e7]], dtype=np.float32)
        path = tmp_path / "f.vcmf"
        write_features(path, mat)
        out = read_features(path)
        assert out.dtype == np.float32
        assert np.array_equal(out, mat)

    def test_round_trip_bit_exact_bytes(self, tmp_path):
        rng = np.random.default_rng(3)
        mat = rng.standard_normal((17, 9)).astype(np.float32)
        p1, p2 = tmp_path / "a.vcmf", tmp_path / "b.vcmf"
        write_features(p1, mat)
        write_features(p2, read_features(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_rows_preserves_dim(self, tmp_path):
        path = tmp_path / "empty.vcmf"
        write_features(path, np.zeros((0, 7), dtype=np.float32))
        out = read_features(path)
        assert out.shape == (0, 7)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vcmf"
        path.write_bytes(b"NOPE" + struct.pack("<II", 1, 1) + b"\x00" * 4)
        with pytest.raises(CorpusError, match="magic"):
            read_features(path)

    def test_truncated_payload_reports_byte_counts(self, tmp_path):
        path = tmp_path / "t.vcmf"
        write_features(path, np.ones((3, 2), dtype=np.float32))
        data = path.read_bytes()
        path.write_bytes(data[:-5])  # cut mid-row
        with pytest.raises(CorpusError, match=r"expected 36 bytes.*got 31"):
            read_features(path)

    def test_rejects_non_finite(self, tmp_path):
        with pytest.raises(CorpusError, match="non-finite"):
            write_features(tmp_path / "nan.vcmf", np.array([[np.nan]]))


# ---------------------------------------------------------------------------
# Type invariants
# ---------------------------------------------------------------------------


def _video(n_frames=8, spans=((0, 8),), vid="v0"):
    subs = tuple(SubtitleSpan((1, 2), lo, hi) for lo, hi in spans)
    return VideoRecord(vid, n_frames, f"{vid}.vcmf", subs)


class TestInvariants:
    def test_frame_span_rejects_reversed(self):
        with pytest.raises(CorpusError):
            FrameSpan(5, 3)

    def test_subtitle_span_rejects_empty_interval(self):
        with pytest.raises(CorpusError):
            SubtitleSpan((1,), 4, 4)

    def test_subtitle_span_rejects_no_tokens(self):
        with pytest.raises(CorpusError):
            SubtitleSpan((), 0, 4)

    def test_coverage_gap_rejected(self):
        with pytest.raises(CorpusError, match="gap"):
            _video(spans=((0, 3), (4, 8)))

    def test_coverage_overlap_rejected(self):
        with pytest.raises(CorpusError, match="gap/overlap"):
            _video(spans=((0, 5), (3, 8)))

    def test_coverage_short_rejected(self):
        with pytest.raises(CorpusError, match="cover"):
            _video(spans=((0, 6),))

    def test_query_rejects_empty_tokens(self):
        with pytest.raises(CorpusError, match="empty"):
            QueryRecord("q0", (), "v0", FrameSpan(0, 1))

    def test_query_rejects_bad_split(self):
        with pytest.raises(CorpusError, match="split"):
            QueryRecord("q0", (1,), "v0", FrameSpan(0, 1), split="test")


# ---------------------------------------------------------------------------
# Manifest load/save
# ---------------------------------------------------------------------------


class TestManifest:
    def test_empty_file_is_empty_corpus(self, tmp_path):
        path = tmp_path / "manifest.jsonl"
        path.write_text("")
        m = load_manifest(path)
        assert m.videos == [] and m.queries == []

    def test_moment_outside_video_names_ids(self, tmp_path):
        m = generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        bad = {
            "kind": "query",
            "query_id": "q_bad",
            "tokens": [1],
            "target_video_id": m.videos[0].video_id,
            "moment": {"start": 0, "end": 99},
            "split": "train",
        }
        path = tmp_path / "manifest.jsonl"
        path.write_text(path.read_text() + json.dumps(bad) + "\n")
        with pytest.raises(CorpusError, match="q_bad.*v0000"):
            load_manifest(path)

    def test_duplicate_video_id_rejected(self, tmp_path):
        generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        path = tmp_path / "manifest.jsonl"
        lines = [l for l in path.read_text().splitlines() if '"video"' in l]
        path.write_text(path.read_text() + lines[0] + "\n")
        with pytest.raises(CorpusError, match="duplicate video"):
            load_manifest(path)

    def test_missing_feature_file_rejected(self, tmp_path):
        m = generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        (tmp_path / m.videos[0].feature_path).unlink()
        with pytest.raises(CorpusError, match="missing feature file"):
            load_manifest(tmp_path / "manifest.jsonl")

    def test_feature_row_count_mismatch_rejected(self, tmp_path):
        m = generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        write_features(tmp_path / m.videos[0].feature_path,
                       np.zeros((3, 4), dtype=np.float32))
        with pytest.raises(CorpusError, match="3 rows"):
            load_manifest(tmp_path / "manifest.jsonl")

    def test_unknown_target_video_rejected(self, tmp_path):
        generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        path = tmp_path / "manifest.jsonl"
        bad = {"kind": "query", "query_id": "qx", "tokens": [1],
               "target_video_id": "ghost", "moment": {"start": 0, "end": 1}}
        path.write_text(path.read_text() + json.dumps(bad) + "\n")
        with pytest.raises(CorpusError, match="unknown target"):
            load_manifest(path)

    def test_round_trip_structural_equality(self, tmp_path):
        m = generate_synthetic_corpus(3, 12, 6, 16, seed=5, out_dir=tmp_path)
        m2 = load_manifest(tmp_path / "manifest.jsonl")
        assert m2.videos == m.videos
        assert m2.queries == m.queries
        assert m2.generator["seed"] == 5


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------


class TestGenerator:
    def test_shape_contract(self, tmp_path):
        m = generate_synthetic_corpus(1, 8, 4, 16, seed=0, out_dir=tmp_path)
        assert len(m.videos) == 1
        feats = read_features(tmp_path / m.videos[0].feature_path)
        assert feats.shape == (8, 4)
        assert len(m.queries) >= 1
        for q in m.queries:
            assert 0 <= q.moment.start <= q.moment.end < 8

    def test_same_seed_byte_identical(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_synthetic_corpus(3, 16, 8, 32, seed=9, out_dir=d1)
        generate_synthetic_corpus(3, 16, 8, 32, seed=9, out_dir=d2)
        for f in sorted(d1.iterdir()):
            assert f.read_bytes() == (d2 / f.name).read_bytes(), f.name

    def test_different_seed_differs(self, tmp_path):
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_synthetic_corpus(2, 16, 8, 32, seed=1, out_dir=d1)
        generate_synthetic_corpus(2, 16, 8, 32, seed=2, out_dir=d2)
        assert (d1 / "manifest.jsonl").read_bytes() != (d2 / "manifest.jsonl").read_bytes()

    def test_rejects_small_vocab(self, tmp_path):
        with pytest.raises(CorpusError, match="vocab_size"):
            generate_synthetic_corpus(20, 16, 8, 10, seed=0, out_dir=tmp_path)

    def test_nearest_neighbor_oracle(self, tmp_path):
        """Mean moment feature vs projected query concept retrieves the
        right video at rank 1 for >= 90% of queries."""
        m = generate_synthetic_corpus(50, 32, 16, 64, seed=7, out_dir=tmp_path)
        concepts, projection = rebuild_oracle(m)
        video_order = [v.video_id for v in m.videos]
        moment_means = {}
        for q in m.queries:
            v = m.video_by_id(q.target_video_id)
            feats = read_features(tmp_path / v.feature_path)
            moment_means.setdefault(
                q.target_video_id, feats[q.moment.start : q.moment.end + 1].mean(axis=0))
        mean_matrix = np.stack([moment_means[vid] for vid in video_order])
        mean_matrix /= np.linalg.norm(mean_matrix, axis=1, keepdims=True)
        hits = 0
        for qi, q in enumerate(m.queries):
            target_concept = projection @ concepts[video_order.index(q.target_video_id)]
            cos = mean_matrix @ (target_concept / np.linalg.norm(target_concept))
            hits += video_order[int(np.argmax(cos))] == q.target_video_id
        assert hits / len(m.queries) >= 0.90


# ---------------------------------------------------------------------------
# Alignment
# ---------------------------------------------------------------------------


class TestAlignment:
    def test_single_subtitle_is_identity(self):
        video = _video(8, ((0, 8),))
        feats = np.arange(16, dtype=np.float32).reshape(8, 2)
        groups = align_frames_to_subtitles(video, feats)
        assert len(groups) == 1
        assert np.array_equal(groups[0][1], feats)

    def test_two_span_group_sizes(self):
        video = _video(8, ((0, 3), (3, 8)))
        feats = np.zeros((8, 2), dtype=np.float32)
        groups = align_frames_to_subtitles(video, feats)
        assert [g.shape[0] for _, g in groups] == [3, 5]

    def test_row_count_mismatch_rejected(self):
        with pytest.raises(CorpusError, match="feature rows"):
            align_frames_to_subtitles(_video(8), np.zeros((5, 2), dtype=np.float32))

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_partition_reassembles(self, data):
        n = data.draw(st.integers(2, 40))
        n_cuts = data.draw(st.integers(0, min(5, n - 1)))
        cuts = sorted(data.draw(st.sets(st.integers(1, n - 1),
                                        min_size=n_cuts, max_size=n_cuts)))
        bounds = [0, *cuts, n]
        video = _video(n, tuple(zip(bounds[:-1], bounds[1:])))
        feats = np.random.default_rng(0).standard_normal((n, 3)).astype(np.float32)
        groups = align_frames_to_subtitles(video, feats)
        assert sum(g.shape[0] for _, g in groups) == n
        assert np.array_equal(np.concatenate([g for _, g in groups]), feats)
