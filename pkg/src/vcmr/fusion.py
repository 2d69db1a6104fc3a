"""Fine-grained moment localization: context-query attention, fused
highlight-weighted features, the conditioned span predictor, and the
moment-retrieval loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn


@dataclass
class CQAMatrices:
    s: Tensor     # N_v x N_q raw trilinear scores
    s_r: Tensor   # row-stochastic
    s_c: Tensor   # column-stochastic
    a: Tensor     # N_v x d frame-to-token attention output
    b: Tensor     # N_v x d token-to-frame attention output


@dataclass
class FusedMomentFeatures:
    v_q: Tensor        # N_v x d fused features
    s_h: Tensor        # N_v highlight scores in (0, 1)
    v_q_tilde: Tensor  # N_v x d highlight-weighted features


@dataclass
class SpanScores:
    s_st: Tensor  # N_v start logits
    s_ed: Tensor  # N_v end logits


@dataclass
class SpanLabels:
    y_st: int
    y_ed: int
    y_h: Tensor  # N_v {0,1} foreground mask

    def __post_init__(self):
        if self.y_st > self.y_ed:
            raise ValueError(f"y_st {self.y_st} > y_ed {self.y_ed}")
        n = self.y_h.shape[0]
        if self.y_ed >= n:
            raise ValueError(f"y_ed {self.y_ed} outside {n} frames")
        expected = torch.zeros(n, dtype=self.y_h.dtype)
        expected[self.y_st : self.y_ed + 1] = 1
        if not torch.equal(self.y_h, expected):
            raise ValueError("y_h inconsistent with [y_st, y_ed]")


def make_span_labels(start: int, end: int, n_frames: int, dtype=torch.float32) -> SpanLabels:
    y_h = torch.zeros(n_frames, dtype=dtype)
    y_h[start : end + 1] = 1
    return SpanLabels(y_st=start, y_ed=end, y_h=y_h)


class CQAttention(nn.Module):
    """Trilinear frame-token similarity with row/column softmax attention."""

    def __init__(self, d: int):
        super().__init__()
        self.w_frame = nn.Parameter(torch.zeros(d))
        self.w_token = nn.Parameter(torch.zeros(d))
        self.w_prod = nn.Parameter(torch.zeros(d))

    def forward(self, v_temp: Tensor, query_tokens: Tensor) -> CQAMatrices:
        if v_temp.shape[0] == 0 or query_tokens.shape[0] == 0:
            raise ValueError("empty video or query")
        if v_temp.shape[1] != query_tokens.shape[1]:
            raise ValueError("dim mismatch")
        s = (
            (v_temp @ self.w_frame).unsqueeze(1)
            + (query_tokens @ self.w_token).unsqueeze(0)
            + (v_temp * self.w_prod) @ query_tokens.T
        )
        s_r = torch.softmax(s, dim=1)
        s_c = torch.softmax(s, dim=0)
        a = s_r @ query_tokens
        b = s_r @ s_c.T @ v_temp
        return CQAMatrices(s=s, s_r=s_r, s_c=s_c, a=a, b=b)


class FusionLayer(nn.Module):
    """FC over [v_temp; A; v_temp*A; v_temp*B], reducing back to d."""

    def __init__(self, d: int):
        super().__init__()
        self.fc = nn.Linear(4 * d, d)

    def forward(self, v_temp: Tensor, cqa: CQAMatrices) -> Tensor:
        x = torch.cat([v_temp, cqa.a, v_temp * cqa.a, v_temp * cqa.b], dim=1)
        return self.fc(x)


class HighlightHead(nn.Module):
    """Width-5 convolution over [v_q_i; q_c] frames, sigmoid-squashed."""

    KERNEL = 5

    def __init__(self, d: int):
        super().__init__()
        self.conv = nn.Conv1d(2 * d, 1, self.KERNEL, padding=self.KERNEL // 2)

    def forward(self, v_q: Tensor, q_c: Tensor) -> Tensor:
        if v_q.shape[1] != q_c.shape[0]:
            raise ValueError("dim mismatch")
        x = torch.cat([v_q, q_c.unsqueeze(0).expand(v_q.shape[0], -1)], dim=1)
        logits = self.conv(x.T.unsqueeze(0)).view(-1)
        # clamp away from the saturated endpoints so the (0, 1) contract
        # survives float32 rounding
        return torch.sigmoid(logits).clamp(1e-6, 1 - 1e-6)


def apply_highlight(v_q: Tensor, s_h: Tensor) -> FusedMomentFeatures:
    if v_q.shape[0] != s_h.shape[0]:
        raise ValueError("shape mismatch")
    return FusedMomentFeatures(v_q=v_q, s_h=s_h, v_q_tilde=s_h.unsqueeze(1) * v_q)


class SpanPredictor(nn.Module):
    """Conditioned span scorer.

    A two-layer LSTM runs over the highlight-weighted features to score
    starts; a second two-layer LSTM consumes the first one's hidden
    states to score ends, so end scores are conditioned on the start
    recurrence. Both stacks are unidirectional, so scores at position t
    only see positions <= t.
    """

    def __init__(self, d: int):
        super().__init__()
        self.lstm_st = nn.LSTM(d, d, num_layers=2)
        self.lstm_ed = nn.LSTM(d, d, num_layers=2)
        self.fc_st = nn.Linear(2 * d, 1)
        self.fc_ed = nn.Linear(2 * d, 1)

    def forward(self, v_q_tilde: Tensor) -> SpanScores:
        if v_q_tilde.shape[0] < 1:
            raise ValueError("empty sequence")
        h_st, _ = self.lstm_st(v_q_tilde.unsqueeze(1))
        h_ed, _ = self.lstm_ed(h_st)
        h_st = h_st.squeeze(1)
        h_ed = h_ed.squeeze(1)
        s_st = self.fc_st(torch.cat([h_st, v_q_tilde], dim=1)).view(-1)
        s_ed = self.fc_ed(torch.cat([h_ed, v_q_tilde], dim=1)).view(-1)
        return SpanScores(s_st=s_st, s_ed=s_ed)


class FusionBranch(nn.Module):
    """CQA -> fuse -> highlight -> span scores, end to end."""

    def __init__(self, d: int):
        super().__init__()
        self.cqa = CQAttention(d)
        self.fuse = FusionLayer(d)
        self.highlight = HighlightHead(d)
        self.span = SpanPredictor(d)

    def forward(self, v_temp: Tensor, query_tokens: Tensor, q_c: Tensor):
        cqa = self.cqa(v_temp, query_tokens)
        v_q = self.fuse(v_temp, cqa)
        s_h = self.highlight(v_q, q_c)
        fused = apply_highlight(v_q, s_h)
        scores = self.span(fused.v_q_tilde)
        return fused, scores


def moment_loss(scores: SpanScores, s_h: Tensor, labels: SpanLabels) -> Tensor:
    """0.5 * (start CE + end CE) + mean-absolute highlight error."""
    n = scores.s_st.shape[0]
    if labels.y_ed >= n:
        raise ValueError(f"label end {labels.y_ed} outside {n} frames")
    ce_st = -torch.log_softmax(scores.s_st, dim=0)[labels.y_st]
    ce_ed = -torch.log_softmax(scores.s_ed, dim=0)[labels.y_ed]
    l1 = (s_h - labels.y_h.to(s_h.dtype)).abs().mean()
    return 0.5 * (ce_st + ce_ed) + l1


def predict_span(scores: SpanScores, l_max: int) -> tuple[int, int, float]:
    """Best (start, end) maximizing P_st[i] * P_ed[j] with j in [i, i+l_max-1].

    Ties resolve to the smallest start, then the smallest end.
    """
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    p_st = torch.softmax(scores.s_st, dim=0)
    p_ed = torch.softmax(scores.s_ed, dim=0)
    n = p_st.shape[0]
    joint = p_st.unsqueeze(1) * p_ed.unsqueeze(0)
    idx = torch.arange(n)
    valid = (idx.unsqueeze(0) >= idx.unsqueeze(1)) & (
        idx.unsqueeze(0) < idx.unsqueeze(1) + l_max
    )
    joint = torch.where(valid, joint, joint.new_tensor(-1.0))
    # numpy argmax guarantees the first maximum in row-major order, which
    # is exactly the smallest-start-then-smallest-end tie rule
    arr = joint.detach().cpu().numpy()
    i, j = divmod(int(arr.argmax()), n)
    return i, j, float(joint[i, j])
