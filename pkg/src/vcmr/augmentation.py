"""Embedding-level training augmentation: token shuffling, token/feature
cutoff, and dropout, gated stochastically per stream.

The gate fires with probability ``gate_prob``; when it does, one of the
five operations is drawn from ``weights`` (which includes an explicit
"unchanged" outcome), so with the defaults a stream is actually modified
with probability 0.5 * 0.85.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from torch import Tensor


class AugOp(str, Enum):
    SHUFFLE = "shuffle"
    TOKEN_CUTOFF = "token_cutoff"
    FEATURE_CUTOFF = "feature_cutoff"
    DROPOUT = "dropout"
    UNCHANGED = "unchanged"
    GATED_OFF = "gated_off"


DEFAULT_WEIGHTS = {
    AugOp.SHUFFLE: 0.40,
    AugOp.TOKEN_CUTOFF: 0.15,
    AugOp.FEATURE_CUTOFF: 0.15,
    AugOp.DROPOUT: 0.15,
    AugOp.UNCHANGED: 0.15,
}


@dataclass
class AugmentationPolicy:
    gate_prob: float = 0.5
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    cutoff_ratio: float = 0.1
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.weights = {AugOp(k): float(v) for k, v in self.weights.items()}
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"op weights sum to {total}, expected 1")
        probs = [self.gate_prob, self.cutoff_ratio, self.dropout_rate,
                 *self.weights.values()]
        if any(p < 0 or p > 1 for p in probs):
            raise ValueError("all probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "gate_prob": self.gate_prob,
            "weights": {op.value: w for op, w in self.weights.items()},
            "cutoff_ratio": self.cutoff_ratio,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AugmentationRecord:
    op: AugOp
    affected: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"op": self.op.value, "affected": list(self.affected)}


def sample_op(policy: AugmentationPolicy, rng: np.random.Generator) -> AugOp:
    """Gate first, then draw from the conditional op distribution."""
    if rng.random() >= policy.gate_prob:
        return AugOp.GATED_OFF
    ops = list(policy.weights)
    probs = np.array([policy.weights[o] for o in ops])
    return ops[int(rng.choice(len(ops), p=probs / probs.sum()))]


def apply(
    emb: Tensor, op: AugOp, policy: AugmentationPolicy, rng: np.random.Generator
) -> tuple[Tensor, AugmentationRecord]:
    """Apply one augmentation op; shape is always preserved."""
    n, d = emb.shape
    if n == 0:
        raise ValueError("empty embedding matrix")
    if op == AugOp.SHUFFLE:
        perm = rng.permutation(n)
        return emb[torch.as_tensor(perm)], AugmentationRecord(op, perm.tolist())
    if op == AugOp.TOKEN_CUTOFF:
        k = math.ceil(policy.cutoff_ratio * n)
        rows = sorted(rng.choice(n, size=min(k, n), replace=False).tolist())
        mask = torch.ones(n, 1, dtype=emb.dtype)
        mask[rows] = 0
        return emb * mask, AugmentationRecord(op, rows)
    if op == AugOp.FEATURE_CUTOFF:
        k = math.ceil(policy.cutoff_ratio * d)
        cols = sorted(rng.choice(d, size=min(k, d), replace=False).tolist())
        mask = torch.ones(1, d, dtype=emb.dtype)
        mask[0, cols] = 0
        return emb * mask, AugmentationRecord(op, cols)
    if op == AugOp.DROPOUT:
        drop = rng.random((n, d)) < policy.dropout_rate
        mask = torch.as_tensor(~drop).to(emb.dtype)
        return emb * mask, AugmentationRecord(op, np.flatnonzero(drop).tolist())
    if op in (AugOp.UNCHANGED, AugOp.GATED_OFF):
        return emb, AugmentationRecord(op, [])
    raise ValueError(f"unknown op {op!r}")


def augment_batch(
    video_emb: Tensor,
    subtitle_emb: Tensor,
    query_emb: Tensor,
    policy: AugmentationPolicy,
    rng: np.random.Generator,
    training: bool = True,
) -> tuple[tuple[Tensor, Tensor, Tensor], list[AugmentationRecord]]:
    """Independently augment the three embedding streams of one sample."""
    if not training:
        raise RuntimeError("augmentation is train-only; called in eval mode")
    outs = []
    records = []
    for emb in (video_emb, subtitle_emb, query_emb):
        op = sample_op(policy, rng)
        out, rec = apply(emb, op, policy, rng)
        outs.append(out)
        records.append(rec)
    return (outs[0], outs[1], outs[2]), records


def stream_rng(seed: int, item_id: int | str) -> np.random.Generator:
    """Per-item random stream so results don't depend on scheduling order."""
    if isinstance(item_id, str):
        item_id = zlib.crc32(item_id.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed, item_id]))
