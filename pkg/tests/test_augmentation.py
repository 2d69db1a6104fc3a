"""Stochastic embedding augmentation: op sampling, each op's effect,
and the per-stream batch wrapper."""

import math
from collections import Counter

import numpy as np
import pytest
import torch
from scipy import stats

from vcmr.augmentation import (
    AugOp,
    AugmentationPolicy,
    apply,
    augment_batch,
    sample_op,
    stream_rng,
)


def _emb(n=10, d=8, seed=0):
    return torch.tensor(np.random.default_rng(seed).standard_normal((n, d)),
                        dtype=torch.float32)


class TestPolicy:
    def test_default_weights_sum_to_one(self):
        policy = AugmentationPolicy()
        assert sum(policy.weights.values()) == pytest.approx(1.0)

    def test_rejects_bad_weight_sum(self):
        with pytest.raises(ValueError, match="sum"):
            AugmentationPolicy(weights={AugOp.SHUFFLE: 0.5, AugOp.UNCHANGED: 0.4})

    def test_rejects_out_of_range_probability(self):
        with pytest.raises(ValueError, match="probabilities"):
            AugmentationPolicy(gate_prob=1.5)

    def test_dict_round_trip(self):
        policy = AugmentationPolicy(gate_prob=0.3, cutoff_ratio=0.2, seed=5)
        again = AugmentationPolicy.from_dict(policy.to_dict())
        assert again == policy


class TestSampleOp:
    def test_gate_zero_always_off(self):
        policy = AugmentationPolicy(gate_prob=0.0)
        rng = np.random.default_rng(0)
        assert all(sample_op(policy, rng) == AugOp.GATED_OFF for _ in range(200))

    def test_one_hot_weights(self):
        policy = AugmentationPolicy(
            gate_prob=1.0,
            weights={AugOp.DROPOUT: 1.0, AugOp.SHUFFLE: 0.0, AugOp.TOKEN_CUTOFF: 0.0,
                     AugOp.FEATURE_CUTOFF: 0.0, AugOp.UNCHANGED: 0.0})
        rng = np.random.default_rng(1)
        assert all(sample_op(policy, rng) == AugOp.DROPOUT for _ in range(200))

    def test_empirical_frequencies_match_policy(self):
        """Shuffle lands at 0.40 of the gated half at 100k draws."""
        policy = AugmentationPolicy()
        rng = np.random.default_rng(2)
        n = 100_000
        counts = Counter(sample_op(policy, rng) for _ in range(n))
        assert counts[AugOp.SHUFFLE] / n == pytest.approx(0.40 * 0.5, abs=0.01)
        assert counts[AugOp.GATED_OFF] / n == pytest.approx(0.5, abs=0.01)
        for op in (AugOp.TOKEN_CUTOFF, AugOp.FEATURE_CUTOFF, AugOp.DROPOUT,
                   AugOp.UNCHANGED):
            assert counts[op] / n == pytest.approx(0.15 * 0.5, abs=0.01)

    def test_chi_square_goodness_of_fit(self):
        policy = AugmentationPolicy()
        rng = np.random.default_rng(3)
        n = 100_000
        counts = Counter(sample_op(policy, rng) for _ in range(n))
        ops = [AugOp.GATED_OFF, AugOp.SHUFFLE, AugOp.TOKEN_CUTOFF,
               AugOp.FEATURE_CUTOFF, AugOp.DROPOUT, AugOp.UNCHANGED]
        expected = np.array([0.5, 0.2, 0.075, 0.075, 0.075, 0.075]) * n
        observed = np.array([counts[o] for o in ops])
        _, p_value = stats.chisquare(observed, expected)
        assert p_value > 0.001


class TestApply:
    def test_shuffle_preserves_row_multiset(self):
        x = _emb()
        out, rec = apply(x, AugOp.SHUFFLE, AugmentationPolicy(), np.random.default_rng(4))
        assert rec.op == AugOp.SHUFFLE
        assert out.shape == x.shape
        torch.testing.assert_close(out, x[torch.as_tensor(rec.affected)])
        a = sorted(map(tuple, x.numpy().tolist()))
        b = sorted(map(tuple, out.numpy().tolist()))
        assert a == b

    def test_token_cutoff_zeroes_exact_row_count(self):
        x = _emb(10, 8, seed=1) + 5.0  # keep rows nonzero
        out, rec = apply(x, AugOp.TOKEN_CUTOFF, AugmentationPolicy(cutoff_ratio=0.1),
                         np.random.default_rng(5))
        zero_rows = [i for i in range(10) if torch.equal(out[i], torch.zeros(8))]
        assert len(zero_rows) == 1
        assert zero_rows == rec.affected

    def test_feature_cutoff_zeroes_columns(self):
        x = _emb(6, 10, seed=2) + 5.0
        out, rec = apply(x, AugOp.FEATURE_CUTOFF, AugmentationPolicy(cutoff_ratio=0.25),
                         np.random.default_rng(6))
        assert len(rec.affected) == math.ceil(0.25 * 10)
        for c in rec.affected:
            assert torch.equal(out[:, c], torch.zeros(6))
        keep = [c for c in range(10) if c not in rec.affected]
        torch.testing.assert_close(out[:, keep], x[:, keep])

    def test_dropout_rate_one_zeroes_everything(self):
        x = _emb(5, 4, seed=3) + 5.0
        out, _ = apply(x, AugOp.DROPOUT, AugmentationPolicy(dropout_rate=1.0),
                       np.random.default_rng(7))
        torch.testing.assert_close(out, torch.zeros_like(x))

    def test_unchanged_and_gated_off_identity(self):
        x = _emb()
        for op in (AugOp.UNCHANGED, AugOp.GATED_OFF):
            out, rec = apply(x, op, AugmentationPolicy(), np.random.default_rng(8))
            assert torch.equal(out, x)
            assert rec.affected == []

    def test_all_ops_preserve_shape(self):
        x = _emb(7, 5, seed=4)
        policy = AugmentationPolicy()
        for op in AugOp:
            out, _ = apply(x, op, policy, np.random.default_rng(9))
            assert out.shape == x.shape

    def test_empty_matrix_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            apply(torch.zeros(0, 4), AugOp.SHUFFLE, AugmentationPolicy(),
                  np.random.default_rng(0))


class TestAugmentBatch:
    def test_gate_zero_leaves_all_streams(self):
        policy = AugmentationPolicy(gate_prob=0.0)
        v, s, q = _emb(seed=1), _emb(seed=2), _emb(seed=3)
        (v2, s2, q2), records = augment_batch(v, s, q, policy, np.random.default_rng(0))
        assert torch.equal(v2, v) and torch.equal(s2, s) and torch.equal(q2, q)
        assert all(r.op == AugOp.GATED_OFF for r in records)

    def test_exactly_three_records(self):
        (_, _, _), records = augment_batch(
            _emb(seed=1), _emb(seed=2), _emb(seed=3),
            AugmentationPolicy(), np.random.default_rng(1))
        assert len(records) == 3

    def test_fixed_seed_reproducible(self):
        policy = AugmentationPolicy()
        v, s, q = _emb(seed=1), _emb(seed=2), _emb(seed=3)
        out1, rec1 = augment_batch(v, s, q, policy, np.random.default_rng(42))
        out2, rec2 = augment_batch(v, s, q, policy, np.random.default_rng(42))
        for a, b in zip(out1, out2):
            assert torch.equal(a, b)
        assert [r.op for r in rec1] == [r.op for r in rec2]

    def test_eval_mode_rejected(self):
        with pytest.raises(RuntimeError, match="eval"):
            augment_batch(_emb(), _emb(), _emb(), AugmentationPolicy(),
                          np.random.default_rng(0), training=False)


class TestStreamRng:
    def test_independent_of_order(self):
        a1 = stream_rng(7, "q1").random(3)
        b1 = stream_rng(7, "q2").random(3)
        b2 = stream_rng(7, "q2").random(3)
        a2 = stream_rng(7, "q1").random(3)
        np.testing.assert_array_equal(a1, a2)
        np.testing.assert_array_equal(b1, b2)
        assert not np.array_equal(a1, b1)
