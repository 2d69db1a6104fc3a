"""Corpus data model, binary feature format, and synthetic benchmark generator.

A corpus lives in a directory: a JSON-lines manifest (``manifest.jsonl``)
describing videos and queries, plus one binary feature file per video.
The synthetic generator plants one ground-truth moment per query whose
frames carry a linear image of the query's latent concept vector, so a
simple nearest-neighbor oracle can verify the corpus is learnable.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"VCMF"
NOISE_SIGMA = 0.1
N_BACKGROUND_CONCEPTS = 4


class CorpusError(ValueError):
    """Raised for malformed manifests, feature files, or invariant violations."""


@dataclass(frozen=True)
class FrameSpan:
    """Inclusive [start, end] frame interval of an annotated moment."""

    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise CorpusError(f"invalid frame span [{self.start}, {self.end}]")

    @property
    def length(self) -> int:
        return self.end - self.start + 1


@dataclass(frozen=True)
class SubtitleSpan:
    """Token ids of one subtitle sentence and the [start, end) frames it covers."""

    tokens: tuple[int, ...]
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if not (0 <= self.start_frame < self.end_frame):
            raise CorpusError(
                f"invalid subtitle span [{self.start_frame}, {self.end_frame})"
            )
        if len(self.tokens) < 1:
            raise CorpusError("subtitle span has no tokens")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    n_frames: int
    feature_path: str
    subtitles: tuple[SubtitleSpan, ...]

    def __post_init__(self):
        if self.n_frames < 1:
            raise CorpusError(f"video {self.video_id}: n_frames must be >= 1")
        cursor = 0
        for sub in self.subtitles:
            if sub.start_frame != cursor:
                raise CorpusError(
                    f"video {self.video_id}: subtitle coverage gap/overlap at "
                    f"frame {sub.start_frame} (expected {cursor})"
                )
            cursor = sub.end_frame
        if cursor != self.n_frames:
            raise CorpusError(
                f"video {self.video_id}: subtitles cover [0, {cursor}) but video "
                f"has {self.n_frames} frames"
            )


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    tokens: tuple[int, ...]
    target_video_id: str
    moment: FrameSpan
    split: str = "train"

    def __post_init__(self):
        if len(self.tokens) < 1:
            raise CorpusError(f"query {self.query_id}: empty token list")
        if self.split not in ("train", "val"):
            raise CorpusError(f"query {self.query_id}: unknown split {self.split!r}")


@dataclass
class CorpusManifest:
    """All videos and queries of a corpus plus the generator recipe, if any."""

    root: Path
    videos: list[VideoRecord] = field(default_factory=list)
    queries: list[QueryRecord] = field(default_factory=list)
    generator: dict | None = None

    def video_by_id(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.video_id == video_id:
                return v
        raise CorpusError(f"unknown video id {video_id!r}")

    def queries_for_split(self, split: str) -> list[QueryRecord]:
        return [q for q in self.queries if q.split == split]


# ---------------------------------------------------------------------------
# Binary feature files
# ---------------------------------------------------------------------------


def write_features(path: str | Path, matrix: np.ndarray) -> None:
    """Write a float32 matrix in the "VCMF" binary format."""
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise CorpusError("feature matrix must be 2-D")
    if not np.all(np.isfinite(matrix)):
        raise CorpusError("feature matrix contains non-finite values")
    rows, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<II", rows, dim))
        f.write(matrix.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    """Read a "VCMF" feature file, validating header and payload size."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != FEATURE_MAGIC:
        raise CorpusError(f"{path}: bad magic bytes {data[:4]!r}")
    if len(data) < 12:
        raise CorpusError(f"{path}: truncated header")
    rows, dim = struct.unpack("<II", data[4:12])
    expected = 12 + rows * dim * 4
    if len(data) != expected:
        raise CorpusError(
            f"{path}: expected {expected} bytes for {rows}x{dim} float32, got {len(data)}"
        )
    matrix = np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, dim).copy()
    if not np.all(np.isfinite(matrix)):
        raise CorpusError(f"{path}: non-finite feature values")
    return matrix


# ---------------------------------------------------------------------------
# Manifest serialization
# ---------------------------------------------------------------------------


def _video_to_json(v: VideoRecord) -> dict:
    return {
        "kind": "video",
        "video_id": v.video_id,
        "n_frames": v.n_frames,
        "feature_path": v.feature_path,
        "subtitles": [
            {"tokens": list(s.tokens), "start_frame": s.start_frame, "end_frame": s.end_frame}
            for s in v.subtitles
        ],
    }


def _query_to_json(q: QueryRecord) -> dict:
    return {
        "kind": "query",
        "query_id": q.query_id,
        "tokens": list(q.tokens),
        "target_video_id": q.target_video_id,
        "moment": {"start": q.moment.start, "end": q.moment.end},
        "split": q.split,
    }


def save_manifest(manifest: CorpusManifest, path: str | Path | None = None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.jsonl"
    with open(path, "w", encoding="utf-8") as f:
        if manifest.generator is not None:
            f.write(json.dumps({"kind": "generator", **manifest.generator}) + "\n")
        for v in manifest.videos:
            f.write(json.dumps(_video_to_json(v)) + "\n")
        for q in manifest.queries:
            f.write(json.dumps(_query_to_json(q)) + "\n")
    return path


def load_manifest(path: str | Path) -> CorpusManifest:
    """Parse and fully validate a JSON-lines manifest.

    Every type invariant is enforced; a violation raises ``CorpusError``
    naming the offending record.
    """
    path = Path(path)
    root = path.parent
    manifest = CorpusManifest(root=root)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON: {e}") from e
            kind = obj.get("kind")
            if kind == "generator":
                manifest.generator = {k: v for k, v in obj.items() if k != "kind"}
            elif kind == "video":
                manifest.videos.append(_parse_video(obj))
            elif kind == "query":
                manifest.queries.append(_parse_query(obj))
            else:
                raise CorpusError(f"{path}:{lineno}: unknown record kind {kind!r}")
    _validate_corpus(manifest)
    return manifest


def _parse_video(obj: dict) -> VideoRecord:
    subtitles = tuple(
        SubtitleSpan(tuple(int(t) for t in s["tokens"]), int(s["start_frame"]), int(s["end_frame"]))
        for s in obj["subtitles"]
    )
    return VideoRecord(
        video_id=str(obj["video_id"]),
        n_frames=int(obj["n_frames"]),
        feature_path=str(obj["feature_path"]),
        subtitles=subtitles,
    )


def _parse_query(obj: dict) -> QueryRecord:
    m = obj["moment"]
    return QueryRecord(
        query_id=str(obj["query_id"]),
        tokens=tuple(int(t) for t in obj["tokens"]),
        target_video_id=str(obj["target_video_id"]),
        moment=FrameSpan(int(m["start"]), int(m["end"])),
        split=str(obj.get("split", "train")),
    )


def _validate_corpus(manifest: CorpusManifest) -> None:
    seen_videos: set[str] = set()
    for v in manifest.videos:
        if v.video_id in seen_videos:
            raise CorpusError(f"duplicate video id {v.video_id!r}")
        seen_videos.add(v.video_id)
        fpath = manifest.root / v.feature_path
        if not fpath.exists():
            raise CorpusError(f"video {v.video_id}: missing feature file {fpath}")
        feats = read_features(fpath)
        if feats.shape[0] != v.n_frames:
            raise CorpusError(
                f"video {v.video_id}: feature file has {feats.shape[0]} rows, "
                f"expected {v.n_frames}"
            )
    seen_queries: set[str] = set()
    by_id = {v.video_id: v for v in manifest.videos}
    for q in manifest.queries:
        if q.query_id in seen_queries:
            raise CorpusError(f"duplicate query id {q.query_id!r}")
        seen_queries.add(q.query_id)
        target = by_id.get(q.target_video_id)
        if target is None:
            raise CorpusError(
                f"query {q.query_id}: unknown target video {q.target_video_id!r}"
            )
        if q.moment.end >= target.n_frames:
            raise CorpusError(
                f"query {q.query_id}: moment [{q.moment.start}, {q.moment.end}] "
                f"exceeds video {target.video_id} with {target.n_frames} frames"
            )


# ---------------------------------------------------------------------------
# Subtitle-frame alignment
# ---------------------------------------------------------------------------


def align_frames_to_subtitles(
    video: VideoRecord, features: np.ndarray
) -> list[tuple[SubtitleSpan, np.ndarray]]:
    """Partition the frame matrix into per-sentence groups.

    Concatenating the groups in order reproduces ``features`` exactly.
    """
    if features.shape[0] != video.n_frames:
        raise CorpusError(
            f"video {video.video_id}: {features.shape[0]} feature rows for "
            f"{video.n_frames} frames"
        )
    return [(s, features[s.start_frame : s.end_frame]) for s in video.subtitles]


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------


def _concept_matrices(seed: int, n_concepts: int, dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Concept vectors and the projection taking them to feature space."""
    rng = np.random.default_rng(seed + 0xC0FFEE)
    concepts = rng.standard_normal((n_concepts, dim))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    projection = rng.standard_normal((dim, dim)) / math.sqrt(dim)
    return concepts, projection


def rebuild_oracle(manifest: CorpusManifest) -> tuple[np.ndarray, np.ndarray]:
    """Recover (concepts, projection) from the recipe stored in the manifest."""
    if manifest.generator is None:
        raise CorpusError("manifest has no generator recipe")
    g = manifest.generator
    concepts = np.asarray(g["concepts"], dtype=np.float64)
    projection = np.asarray(g["projection"], dtype=np.float64)
    return concepts, projection


def _segment_partition(rng: np.random.Generator, n_frames: int) -> list[tuple[int, int]]:
    """Split [0, n_frames) into 3..5 contiguous segments of >= 3 frames."""
    max_segs = max(1, min(5, n_frames // 3))
    n_segs = int(rng.integers(min(3, max_segs), max_segs + 1))
    lengths = np.full(n_segs, 3)
    for _ in range(n_frames - 3 * n_segs):
        lengths[rng.integers(0, n_segs)] += 1
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    return [(int(bounds[i]), int(bounds[i + 1])) for i in range(n_segs)]


def _concept_tokens(
    rng: np.random.Generator, concept: int, vocab_size: int, n_concepts: int, length: int
) -> tuple[int, ...]:
    """Tokens for a concept: its dedicated id 80% of the time, else uniform."""
    tokens = []
    for _ in range(length):
        if rng.random() < 0.8:
            tokens.append(concept)
        else:
            tokens.append(int(rng.integers(n_concepts, vocab_size)) if vocab_size > n_concepts
                          else concept)
    return tuple(tokens)


def generate_synthetic_corpus(
    n_videos: int,
    frames_per_video: int,
    dim: int,
    vocab_size: int,
    seed: int,
    out_dir: str | Path,
    queries_per_video: int = 4,
) -> CorpusManifest:
    """Generate a corpus with planted moments and write it to ``out_dir``.

    Each video is a sequence of latent concept segments. One segment per
    video is the planted moment of that video's queries: its frames are
    ``projection @ concept`` plus bounded uniform noise, and its subtitle
    tokens are drawn from the concept's token distribution. Background
    segments use a shared pool of background concepts. The last query of
    each video goes to the val split; the rest are train.
    """
    if min(n_videos, frames_per_video, vocab_size) < 1 or dim < 4:
        raise CorpusError("counts must be >= 1 and dim >= 4")
    n_concepts = n_videos + N_BACKGROUND_CONCEPTS
    if vocab_size < n_concepts:
        raise CorpusError(
            f"vocab_size {vocab_size} < number of concepts {n_concepts} "
            f"({n_videos} moment + {N_BACKGROUND_CONCEPTS} background)"
        )
    if frames_per_video < 6:
        raise CorpusError("frames_per_video must be >= 6 to fit a moment segment")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    concepts, projection = _concept_matrices(seed, n_concepts, dim)
    rng = np.random.default_rng(seed)

    manifest = CorpusManifest(root=out_dir)
    for vi in range(n_videos):
        video_id = f"v{vi:04d}"
        segments = _segment_partition(rng, frames_per_video)
        moment_seg = int(rng.integers(0, len(segments)))
        features = np.empty((frames_per_video, dim), dtype=np.float32)
        subtitles = []
        for si, (lo, hi) in enumerate(segments):
            if si == moment_seg:
                concept = vi
            else:
                concept = n_videos + int(rng.integers(0, N_BACKGROUND_CONCEPTS))
            mean = projection @ concepts[concept]
            noise = rng.uniform(-NOISE_SIGMA, NOISE_SIGMA, size=(hi - lo, dim))
            features[lo:hi] = (mean[None, :] + noise).astype(np.float32)
            subtitles.append(
                SubtitleSpan(
                    tokens=_concept_tokens(rng, concept, vocab_size, n_concepts,
                                           int(rng.integers(3, 7))),
                    start_frame=lo,
                    end_frame=hi,
                )
            )
        feature_path = f"{video_id}.vcmf"
        write_features(out_dir / feature_path, features)
        manifest.videos.append(
            VideoRecord(video_id, frames_per_video, feature_path, tuple(subtitles))
        )
        mlo, mhi = segments[moment_seg]
        for qi in range(queries_per_video):
            split = "val" if qi == queries_per_video - 1 else "train"
            manifest.queries.append(
                QueryRecord(
                    query_id=f"q{vi:04d}_{qi}",
                    tokens=_concept_tokens(rng, vi, vocab_size, n_concepts,
                                           int(rng.integers(4, 9))),
                    target_video_id=video_id,
                    moment=FrameSpan(mlo, mhi - 1),
                    split=split,
                )
            )

    manifest.generator = {
        "seed": seed,
        "sigma": NOISE_SIGMA,
        "dim": dim,
        "vocab_size": vocab_size,
        "n_videos": n_videos,
        "n_concepts": n_concepts,
        "n_background": N_BACKGROUND_CONCEPTS,
        "concepts": concepts.tolist(),
        "projection": projection.tolist(),
    }
    save_manifest(manifest)
    return manifest
