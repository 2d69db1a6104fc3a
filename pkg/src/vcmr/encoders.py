"""Hierarchical video/query encoders.

Frames and subtitle tokens are embedded, fused per sentence by a
cross-modal transformer, re-assembled in frame order, and passed through
a temporal transformer (with the embedder output added back as a
residual) to produce contextualized per-frame vectors. Queries go
through the cross-modal transformer with an empty visual side and are
pooled twice: once from the contextualized tokens (the retrieval vector)
and once from the raw token embeddings (the sentence vector used by the
highlight head).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn


@dataclass
class ModelConfig:
    input_dim: int = 16
    d: int = 64
    n_heads: int = 2
    n_layers_cross: int = 1
    n_layers_temp: int = 1
    vocab_size: int = 64
    max_positions: int = 256
    l_max_span: int = 16
    seed: int = 0
    qc_from_cross: bool = False  # pool q_c from contextualized tokens instead of raw embeddings
    cqa_on_cross: bool = False   # CQA attends over contextualized tokens instead of raw embeddings

    def __post_init__(self):
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        for name in ("input_dim", "d", "n_heads", "n_layers_cross", "n_layers_temp",
                     "vocab_size", "max_positions", "l_max_span"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class ContextualizedVideo:
    """Per-frame vectors after cross-modal (v_cross) and temporal (v_temp) encoding."""

    v_cross: Tensor  # N_v x d
    v_temp: Tensor   # N_v x d


@dataclass
class QueryEncoding:
    w_cross: Tensor  # N_q x d contextualized tokens
    q: Tensor        # d, retrieval vector
    q_c: Tensor      # d, sentence vector for the highlight head
    w_emb: Tensor    # N_q x d raw token embeddings (CQA input)
    pool_weights: Tensor = field(default=None)  # N_q, exposed for normalization checks


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic init: uniform +-1/sqrt(fan_in) over named parameters."""
    gen = torch.Generator().manual_seed(seed)
    for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
        fan_in = p.shape[-1] if p.dim() > 1 else max(1, p.numel())
        bound = 1.0 / math.sqrt(fan_in)
        with torch.no_grad():
            p.uniform_(-bound, bound, generator=gen)


class FrameEmbedder(nn.Module):
    """Affine projection of raw frame features plus learned positions."""

    def __init__(self, input_dim: int, d: int, max_positions: int):
        super().__init__()
        self.proj = nn.Linear(input_dim, d)
        self.pos = nn.Parameter(torch.zeros(max_positions, d))

    def forward(self, features: Tensor, start_pos: int = 0) -> Tensor:
        n = features.shape[0]
        if n == 0:
            return features.new_zeros(0, self.pos.shape[1])
        if features.shape[1] != self.proj.in_features:
            raise ValueError(
                f"feature dim {features.shape[1]} != configured {self.proj.in_features}"
            )
        if start_pos + n > self.pos.shape[0]:
            raise ValueError(f"sequence of {n} frames exceeds max positions")
        return self.proj(features) + self.pos[start_pos : start_pos + n]


class TokenEmbedder(nn.Module):
    """Lookup-table embedding plus learned positions."""

    def __init__(self, vocab_size: int, d: int, max_positions: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, d)
        self.pos = nn.Parameter(torch.zeros(max_positions, d))

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.numel() == 0:
            raise ValueError("empty token sequence")
        if tokens.max().item() >= self.table.num_embeddings or tokens.min().item() < 0:
            raise ValueError(
                f"token id out of vocabulary (size {self.table.num_embeddings})"
            )
        if tokens.shape[0] > self.pos.shape[0]:
            raise ValueError("token sequence exceeds max positions")
        return self.table(tokens) + self.pos[: tokens.shape[0]]


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: Tensor, return_attn: bool = False):
        n, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(n, self.n_heads, self.head_dim).transpose(0, 1)
        k = k.view(n, self.n_heads, self.head_dim).transpose(0, 1)
        v = v.view(n, self.n_heads, self.head_dim).transpose(0, 1)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(self.head_dim), dim=-1)
        y = (attn @ v).transpose(0, 1).reshape(n, d)
        y = self.out(y)
        return (y, attn) if return_attn else (y, None)


class TransformerLayer(nn.Module):
    """Post-norm self-attention block with a GELU feed-forward."""

    def __init__(self, d: int, n_heads: int, ffn_ratio: int = 2):
        super().__init__()
        self.attn = MultiHeadSelfAttention(d, n_heads)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, d * ffn_ratio), nn.GELU(), nn.Linear(d * ffn_ratio, d)
        )
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x: Tensor, return_attn: bool = False):
        y, attn = self.attn(x, return_attn=return_attn)
        x = self.norm1(x + y)
        x = self.norm2(x + self.ffn(x))
        return x, attn


class CrossModalEncoder(nn.Module):
    """Multimodal self-attention over the concatenated frame+token sequence.

    Modality-type embeddings distinguish the two streams. The visual side
    may be empty (the query path runs tokens alone).
    """

    def __init__(self, d: int, n_heads: int, n_layers: int):
        super().__init__()
        self.type_emb = nn.Parameter(torch.zeros(2, d))
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads) for _ in range(n_layers))

    def forward(self, frames: Tensor, tokens: Tensor, return_attn: bool = False):
        if frames.shape[0] > 0 and tokens.shape[0] > 0 and frames.shape[1] != tokens.shape[1]:
            raise ValueError("frame/token dim mismatch")
        n_f = frames.shape[0]
        parts = []
        if n_f > 0:
            parts.append(frames + self.type_emb[0])
        if tokens.shape[0] > 0:
            parts.append(tokens + self.type_emb[1])
        if not parts:
            raise ValueError("both modalities empty")
        x = torch.cat(parts, dim=0)
        attn_maps = []
        for layer in self.layers:
            x, attn = layer(x, return_attn=return_attn)
            if return_attn:
                attn_maps.append(attn)
        out = (x[:n_f], x[n_f:])
        return (*out, attn_maps) if return_attn else out


class TemporalEncoder(nn.Module):
    """Self-attention over whole-video frame sequences, with its own positions."""

    def __init__(self, d: int, n_heads: int, n_layers: int, max_positions: int):
        super().__init__()
        self.pos = nn.Parameter(torch.zeros(max_positions, d))
        self.layers = nn.ModuleList(TransformerLayer(d, n_heads) for _ in range(n_layers))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[0] > self.pos.shape[0]:
            raise ValueError("video exceeds max positions")
        x = x + self.pos[: x.shape[0]]
        for layer in self.layers:
            x, _ = layer(x)
        return x


class AttentionPooler(nn.Module):
    """Additive attention pooling to a single vector, with an output affine."""

    def __init__(self, d: int):
        super().__init__()
        self.score = nn.Sequential(nn.Linear(d, d), nn.Tanh(), nn.Linear(d, 1))
        self.out = nn.Linear(d, d)

    def forward(self, x: Tensor, return_weights: bool = False):
        weights = torch.softmax(self.score(x).squeeze(-1), dim=0)
        pooled = self.out(weights @ x)
        return (pooled, weights) if return_weights else (pooled, None)


class HierarchicalEncoder(nn.Module):
    """Full encoding stack shared by the retrieval and localization branches."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frame_embedder = FrameEmbedder(config.input_dim, config.d, config.max_positions)
        self.token_embedder = TokenEmbedder(config.vocab_size, config.d, config.max_positions)
        self.cross = CrossModalEncoder(config.d, config.n_heads, config.n_layers_cross)
        self.temporal = TemporalEncoder(config.d, config.n_heads, config.n_layers_temp,
                                        config.max_positions)
        self.pooler_q = AttentionPooler(config.d)
        self.pooler_qc = AttentionPooler(config.d)
        init_parameters(self, config.seed)
        # test instrumentation: captures the temporal encoder's input when set
        self._capture_temporal_input = False
        self.last_temporal_input: Tensor | None = None

    def embed_frames(self, features: Tensor) -> Tensor:
        return self.frame_embedder(features)

    def embed_tokens(self, tokens: Tensor) -> Tensor:
        return self.token_embedder(tokens)

    def encode_video_from_embeddings(
        self,
        frame_emb: Tensor,
        sentence_token_embs: list[Tensor],
        sentence_bounds: list[tuple[int, int]],
    ) -> ContextualizedVideo:
        """Cross-modal fusion per sentence, then temporal encoding in frame order."""
        if len(sentence_token_embs) != len(sentence_bounds):
            raise ValueError("one token matrix required per sentence")
        chunks = []
        for tok_emb, (lo, hi) in zip(sentence_token_embs, sentence_bounds):
            frames_out, _ = self.cross(frame_emb[lo:hi], tok_emb)
            chunks.append(frames_out)
        v_cross = torch.cat(chunks, dim=0)
        if v_cross.shape[0] != frame_emb.shape[0]:
            raise ValueError("sentence bounds do not cover the video")
        temporal_in = frame_emb + v_cross
        if self._capture_temporal_input:
            self.last_temporal_input = temporal_in.detach().clone()
        v_temp = self.temporal(temporal_in)
        return ContextualizedVideo(v_cross=v_cross, v_temp=v_temp)

    def encode_video(self, features: Tensor, video) -> ContextualizedVideo:
        """Encode a raw feature matrix using a VideoRecord's subtitle structure."""
        frame_emb = self.embed_frames(features)
        tok_embs = []
        bounds = []
        for sub in video.subtitles:
            tokens = torch.as_tensor(sub.tokens, dtype=torch.long)
            tok_embs.append(self.embed_tokens(tokens))
            bounds.append((sub.start_frame, sub.end_frame))
        return self.encode_video_from_embeddings(frame_emb, tok_embs, bounds)

    def encode_query_from_embeddings(self, w_emb: Tensor) -> QueryEncoding:
        if w_emb.shape[0] == 0:
            raise ValueError("empty query")
        empty_frames = w_emb.new_zeros(0, w_emb.shape[1])
        _, w_cross = self.cross(empty_frames, w_emb)
        q, weights = self.pooler_q(w_cross, return_weights=True)
        qc_input = w_cross if self.config.qc_from_cross else w_emb
        q_c, _ = self.pooler_qc(qc_input)
        return QueryEncoding(w_cross=w_cross, q=q, q_c=q_c, w_emb=w_emb,
                             pool_weights=weights)

    def encode_query(self, tokens: Tensor | list[int]) -> QueryEncoding:
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        return self.encode_query_from_embeddings(self.embed_tokens(tokens))
