"""Late-fusion scoring: global/local video-query similarity, the
convolutional start/end head, and exhaustive top-k corpus ranking."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .encoders import ContextualizedVideo, QueryEncoding

_EPS = 1e-12


@dataclass
class BoundaryProbabilities:
    p_st: Tensor  # N_v, sums to 1
    p_ed: Tensor  # N_v, sums to 1


def global_similarity(video: ContextualizedVideo, query: QueryEncoding) -> Tensor:
    """Max over frames of cosine(v_temp[i], q)."""
    v = video.v_temp
    if v.shape[0] < 1:
        raise ValueError("video has no frames")
    if v.shape[1] != query.q.shape[0]:
        raise ValueError("dim mismatch between video and query")
    frame_norms = v.norm(dim=1)
    q_norm = query.q.norm()
    if q_norm.item() < _EPS or frame_norms.min().item() < _EPS:
        raise ValueError("degenerate zero-norm embedding")
    cos = (v @ query.q) / (frame_norms * q_norm)
    return cos.max()


def local_similarity(video: ContextualizedVideo, query: QueryEncoding) -> Tensor:
    """Unnormalized per-frame dot products with the query vector."""
    if video.v_temp.shape[1] != query.q.shape[0]:
        raise ValueError("dim mismatch between video and query")
    return video.v_temp @ query.q


class BoundaryHead(nn.Module):
    """Two width-5 1-D convolutions over the local score sequence, softmaxed."""

    KERNEL = 5

    def __init__(self):
        super().__init__()
        self.conv_st = nn.Conv1d(1, 1, self.KERNEL, padding=self.KERNEL // 2)
        self.conv_ed = nn.Conv1d(1, 1, self.KERNEL, padding=self.KERNEL // 2)

    def forward(self, local: Tensor) -> BoundaryProbabilities:
        if local.dim() != 1 or local.shape[0] < 1:
            raise ValueError("local scores must be a non-empty vector")
        x = local.view(1, 1, -1)
        s_st = self.conv_st(x).view(-1)
        s_ed = self.conv_ed(x).view(-1)
        return BoundaryProbabilities(
            p_st=torch.softmax(s_st, dim=0), p_ed=torch.softmax(s_ed, dim=0)
        )


def rank_videos(
    corpus_encodings: list[ContextualizedVideo], query: QueryEncoding, k: int
) -> list[tuple[int, float]]:
    """Top-k videos by global similarity, ties broken by ascending index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not corpus_encodings:
        raise ValueError("empty corpus")
    scored = [
        (i, float(global_similarity(v, query))) for i, v in enumerate(corpus_encodings)
    ]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[: min(k, len(scored))]
