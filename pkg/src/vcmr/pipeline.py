"""Training, two-stage coarse-to-fine inference, and evaluation.

Stage 1 scores every corpus video against the query by max-pooled frame
cosine; stage 2 re-scores the top-k videos with the fusion branch (or
the similarity-only boundary head for the baseline) and emits one moment
candidate per video, ranked by ``alpha * global + log span probability``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn

from .augmentation import AugOp, AugmentationPolicy, apply as apply_aug, sample_op, stream_rng
from .corpus import CorpusManifest, FrameSpan, QueryRecord, read_features
from .encoders import ContextualizedVideo, HierarchicalEncoder, ModelConfig, QueryEncoding
from .fusion import FusionBranch, SpanScores, make_span_labels, moment_loss, predict_span
from .retrieval import BoundaryHead, global_similarity, local_similarity, rank_videos

CHECKPOINT_MAGIC = b"VCKP"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 1e-3
    margin: float = 0.2
    alpha: float = 1.0
    tiou_threshold: float = 0.7
    k_videos: int = 10
    recall_ks: tuple[int, ...] = (1, 5, 10)
    moment_loss_weight: float = 1.0
    use_fusion: bool = True
    use_augmentation: bool = False
    seed: int = 0

    def __post_init__(self):
        self.recall_ks = tuple(int(k) for k in self.recall_ks)
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if not (0 < self.tiou_threshold <= 1):
            raise ValueError("tiou_threshold must lie in (0, 1]")
        if self.k_videos < max(self.recall_ks):
            raise ValueError("k_videos must cover the largest recall K")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["recall_ks"] = list(self.recall_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class MomentPrediction:
    video_id: str
    span: FrameSpan
    score: float


@dataclass
class EvalReport:
    task: str  # "VR" | "VCMR"
    recall_at: dict[int, float]
    aver: float

    def to_json(self) -> dict:
        return {"task": self.task,
                "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
                "aver": self.aver}

    def to_table(self) -> str:
        ks = sorted(self.recall_at)
        header = f"{'task':<6}" + "".join(f"{'R@%d' % k:>8}" for k in ks) + f"{'AveR':>8}"
        row = f"{self.task:<6}" + "".join(f"{self.recall_at[k]:>8.4f}" for k in ks)
        row += f"{self.aver:>8.4f}"
        return header + "\n" + row


class MomentRetrievalModel(nn.Module):
    """Encoder stack plus both localization heads, deterministically initialized."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = HierarchicalEncoder(config)
        self.boundary = BoundaryHead()
        self.fusion = FusionBranch(config.d)
        from .encoders import init_parameters

        init_parameters(self, config.seed)

    def span_scores_for(self, v_temp: Tensor, query: QueryEncoding,
                        baseline: bool = False) -> SpanScores:
        """Span logits from the boundary head (baseline) or the fusion branch."""
        if baseline:
            probs = self.boundary(local_similarity(
                ContextualizedVideo(v_temp, v_temp), query))
            return SpanScores(s_st=torch.log(probs.p_st), s_ed=torch.log(probs.p_ed))
        tokens = query.w_cross if self.config.cqa_on_cross else query.w_emb
        _, scores = self.fusion(v_temp, tokens, query.q_c)
        return scores

    def fusion_outputs(self, v_temp: Tensor, query: QueryEncoding):
        tokens = query.w_cross if self.config.cqa_on_cross else query.w_emb
        return self.fusion(v_temp, tokens, query.q_c)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: MomentRetrievalModel,
                    train_config: TrainConfig | None = None,
                    policy: AugmentationPolicy | None = None,
                    extra: dict | None = None) -> None:
    """Archive: magic, JSON header, then one "VCMF" blob per parameter."""
    names = [n for n, _ in model.named_parameters()]
    header = {
        "model_config": model.config.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "policy": policy.to_dict() if policy else None,
        "extra": extra or {},
        "params": names,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    params = dict(model.named_parameters())
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name in names:
            mat = params[name].detach().cpu().numpy().astype("<f4", copy=False)
            mat2d = mat.reshape(mat.shape[0] if mat.ndim else 1, -1)
            f.write(b"VCMF")
            f.write(struct.pack("<II", mat2d.shape[0], mat2d.shape[1]))
            f.write(np.ascontiguousarray(mat2d).tobytes())


def load_checkpoint(path: str | Path) -> tuple[MomentRetrievalModel, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {data[:4]!r}")
    (header_len,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + header_len].decode("utf-8"))
    model = MomentRetrievalModel(ModelConfig.from_dict(header["model_config"]))
    offset = 8 + header_len
    state = dict(model.named_parameters())
    with torch.no_grad():
        for name in header["params"]:
            if data[offset : offset + 4] != b"VCMF":
                raise ValueError(f"{path}: bad blob magic for {name}")
            rows, dim = struct.unpack("<II", data[offset + 4 : offset + 12])
            offset += 12
            n_bytes = rows * dim * 4
            mat = np.frombuffer(data, dtype="<f4", offset=offset, count=rows * dim)
            offset += n_bytes
            p = state[name]
            p.copy_(torch.from_numpy(mat.reshape(tuple(p.shape)).copy()))
    return model, header


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def retrieval_loss(scores: Tensor, positives: list[int], margin: float,
                   same_video: Tensor | None = None) -> Tensor:
    """Bidirectional in-batch hinge over a query x video score matrix.

    ``same_video[i, j]`` marks (query i, video j) pairs that are positive
    even though j is not query i's designated column; those are excluded
    from the negative sets.
    """
    n_q, n_v = scores.shape
    if len(positives) != n_q:
        raise ValueError("one positive per query required")
    if any(p < 0 or p >= n_v for p in positives):
        raise ValueError("positive index outside score matrix")
    pos_idx = torch.as_tensor(positives)
    pos = scores[torch.arange(n_q), pos_idx]
    neg_mask = torch.ones_like(scores, dtype=torch.bool)
    neg_mask[torch.arange(n_q), pos_idx] = False
    if same_video is not None:
        neg_mask &= ~same_video
    terms = []
    # query -> video: other videos in the row
    hinge_qv = torch.clamp(margin - pos.unsqueeze(1) + scores, min=0)
    if neg_mask.any():
        terms.append(hinge_qv[neg_mask])
    # video -> query: other queries scored against my positive video
    col_scores = scores[:, pos_idx]  # col_scores[j, i] = score(query j, video of i)
    hinge_vq = torch.clamp(margin - pos.unsqueeze(0) + col_scores, min=0)
    col_mask = neg_mask[:, pos_idx]
    if col_mask.any():
        terms.append(hinge_vq[col_mask])
    if not terms:
        return scores.new_zeros(())
    return torch.cat(terms).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _encode_video_for_training(
    model: MomentRetrievalModel, features: Tensor, video,
    policy: AugmentationPolicy | None, rng: np.random.Generator | None,
) -> ContextualizedVideo:
    enc = model.encoder
    frame_emb = enc.embed_frames(features)
    tok_embs = [enc.embed_tokens(torch.as_tensor(s.tokens, dtype=torch.long))
                for s in video.subtitles]
    bounds = [(s.start_frame, s.end_frame) for s in video.subtitles]
    if policy is not None:
        op = sample_op(policy, rng)
        if op == AugOp.SHUFFLE:
            # frame order carries the span labels; shuffling frames would
            # supervise the boundary heads against scrambled positions
            op = AugOp.UNCHANGED
        frame_emb, _ = apply_aug(frame_emb, op, policy, rng)
        # one op for the subtitle stream, applied per sentence so tokens
        # never migrate across subtitle spans
        op = sample_op(policy, rng)
        tok_embs = [apply_aug(t, op, policy, rng)[0] for t in tok_embs]
    return enc.encode_video_from_embeddings(frame_emb, tok_embs, bounds)


def _encode_query_for_training(
    model: MomentRetrievalModel, query: QueryRecord,
    policy: AugmentationPolicy | None, rng: np.random.Generator | None,
) -> QueryEncoding:
    enc = model.encoder
    w_emb = enc.embed_tokens(torch.as_tensor(query.tokens, dtype=torch.long))
    if policy is not None:
        w_emb, _ = apply_aug(w_emb, sample_op(policy, rng), policy, rng)
    return enc.encode_query_from_embeddings(w_emb)


def longest_train_moment(manifest: CorpusManifest) -> int:
    moments = [q.moment.length for q in manifest.queries_for_split("train")]
    return max(moments) if moments else 1


def train(
    manifest: CorpusManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    policy: AugmentationPolicy | None = None,
) -> tuple[MomentRetrievalModel, list[dict]]:
    """Train on the manifest's train queries; returns (model, per-epoch log)."""
    train_queries = manifest.queries_for_split("train")
    if not train_queries:
        raise ValueError("corpus has no train split")
    torch.manual_seed(train_config.seed)
    model = MomentRetrievalModel(model_config)
    model.train()
    # Adam with fixed hyperparameters; its state updates are deterministic
    # given the seed, and plain SGD fails to fit the model at desk scale
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    shuffle_rng = np.random.default_rng(train_config.seed)
    features = {
        v.video_id: torch.from_numpy(read_features(manifest.root / v.feature_path))
        for v in manifest.videos
    }
    videos_by_id = {v.video_id: v for v in manifest.videos}
    aug_policy = policy if (policy is not None and train_config.use_augmentation) else None

    history: list[dict] = []
    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(len(train_queries))
        epoch_losses = []
        for batch_no, start in enumerate(range(0, len(order), train_config.batch_size)):
            batch = [train_queries[i] for i in order[start : start + train_config.batch_size]]
            video_ids = sorted({q.target_video_id for q in batch})
            vid_index = {vid: i for i, vid in enumerate(video_ids)}

            encodings = {}
            for vid in video_ids:
                rng = (stream_rng(train_config.seed + epoch, vid) if aug_policy else None)
                encodings[vid] = _encode_video_for_training(
                    model, features[vid], videos_by_id[vid], aug_policy, rng)
            q_encs = []
            for q in batch:
                rng = (stream_rng(train_config.seed + epoch, q.query_id)
                       if aug_policy else None)
                q_encs.append(_encode_query_for_training(model, q, aug_policy, rng))

            scores = torch.stack([
                torch.stack([global_similarity(encodings[vid], qe) for vid in video_ids])
                for qe in q_encs
            ])
            positives = [vid_index[q.target_video_id] for q in batch]
            same_video = torch.zeros_like(scores, dtype=torch.bool)
            for qi, q in enumerate(batch):
                same_video[qi, vid_index[q.target_video_id]] = True
            loss = retrieval_loss(scores, positives, train_config.margin, same_video)

            # moment objective on positive pairs only
            span_losses = []
            for q, qe in zip(batch, q_encs):
                enc = encodings[q.target_video_id]
                labels = make_span_labels(q.moment.start, q.moment.end,
                                          enc.v_temp.shape[0])
                if train_config.use_fusion:
                    fused, span = model.fusion_outputs(enc.v_temp, qe)
                    span_losses.append(moment_loss(span, fused.s_h, labels))
                else:
                    probs = model.boundary(local_similarity(enc, qe))
                    span_losses.append(
                        0.5 * (-torch.log(probs.p_st[labels.y_st])
                               - torch.log(probs.p_ed[labels.y_ed])))
            loss = loss + train_config.moment_loss_weight * torch.stack(span_losses).mean()

            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.detach()))
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_losses))})
    model.eval()
    return model, history


# ---------------------------------------------------------------------------
# Inference and metrics
# ---------------------------------------------------------------------------


def two_stage_inference(
    model: MomentRetrievalModel,
    encodings: list[ContextualizedVideo],
    video_ids: list[str],
    query: QueryEncoding,
    k: int,
    alpha: float,
    l_max: int,
    baseline: bool = False,
) -> list[MomentPrediction]:
    """Rank videos globally, localize a span in each of the top k, re-rank.

    Candidate score is ``alpha * global + log P_st[i] + log P_ed[j]`` for
    the best span of each shortlisted video; output is sorted descending,
    ties broken by stage-1 rank.
    """
    if not encodings:
        raise ValueError("empty corpus")
    top = rank_videos(encodings, query, k)
    preds = []
    for rank, (vi, g) in enumerate(top):
        scores = model.span_scores_for(encodings[vi].v_temp, query, baseline=baseline)
        i, j, prob = predict_span(scores, l_max)
        score = alpha * g + float(np.log(max(prob, 1e-300)))
        preds.append((score, rank, MomentPrediction(video_ids[vi], FrameSpan(i, j), score)))
    preds.sort(key=lambda t: (-t[0], t[1]))
    return [p for _, _, p in preds]


def temporal_iou(a: FrameSpan, b: FrameSpan) -> float:
    """Intersection over union of inclusive frame intervals."""
    inter = min(a.end, b.end) - max(a.start, b.start) + 1
    if inter <= 0:
        return 0.0
    union = a.length + b.length - inter
    return inter / union


def recall_at_k(
    predictions: dict[str, list[MomentPrediction]],
    truth: list[QueryRecord],
    k: int,
    tiou: float,
    task: str,
) -> float:
    """Fraction of queries with a hit in the top k predictions.

    VR counts a hit when the correct video appears (first occurrence per
    video); VCMR additionally requires temporal IoU >= ``tiou``.
    """
    if task not in ("VR", "VCMR"):
        raise ValueError(f"unknown task {task!r}")
    if not truth:
        raise ValueError("empty query list")
    hits = 0
    for q in truth:
        preds = predictions.get(q.query_id, [])
        if task == "VR":
            seen = []
            for p in preds:
                if p.video_id not in seen:
                    seen.append(p.video_id)
            hit = q.target_video_id in seen[:k]
        else:
            hit = any(
                p.video_id == q.target_video_id
                and temporal_iou(p.span, q.moment) >= tiou
                for p in preds[:k]
            )
        hits += int(hit)
    return hits / len(truth)


def encode_corpus(model: MomentRetrievalModel, manifest: CorpusManifest
                  ) -> tuple[list[ContextualizedVideo], list[str]]:
    encodings = []
    video_ids = []
    with torch.no_grad():
        for v in manifest.videos:
            feats = torch.from_numpy(read_features(manifest.root / v.feature_path))
            encodings.append(model.encoder.encode_video(feats, v))
            video_ids.append(v.video_id)
    return encodings, video_ids


def evaluate(
    model: MomentRetrievalModel,
    manifest: CorpusManifest,
    split: str,
    train_config: TrainConfig,
    task: str = "VCMR",
    baseline: bool = False,
    l_max: int | None = None,
) -> EvalReport:
    """Run two-stage inference for every query of a split and report R@K."""
    queries = manifest.queries_for_split(split)
    if not queries:
        raise ValueError(f"split {split!r} is empty")
    if l_max is None:
        l_max = longest_train_moment(manifest)
    model.eval()
    encodings, video_ids = encode_corpus(model, manifest)
    predictions: dict[str, list[MomentPrediction]] = {}
    with torch.no_grad():
        for q in sorted(queries, key=lambda q: q.query_id):
            qe = model.encoder.encode_query(list(q.tokens))
            predictions[q.query_id] = two_stage_inference(
                model, encodings, video_ids, qe, train_config.k_videos,
                train_config.alpha, l_max, baseline=baseline)
    recall = {
        k: recall_at_k(predictions, queries, k, train_config.tiou_threshold, task)
        for k in train_config.recall_ks
    }
    aver = float(np.mean([recall[k] for k in train_config.recall_ks]))
    return EvalReport(task=task, recall_at=recall, aver=aver)
