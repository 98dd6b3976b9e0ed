import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_trace_inputs
from ibloss.errors import ValidationError
from ibloss.losses import (
    LossSpec,
    batch_loss,
    cb_weights,
    class_weight_vector,
    cross_entropy,
    focal,
    ib_factor,
    ib_loss,
    lambda_weights,
    sample_terms,
)
from ibloss.model import ForwardTrace, last_layer_grad_l1
from ibloss.numerics import one_hot, stable_softmax


def trace(f, h):
    f, h = np.asarray(f, float), np.asarray(h, float)
    return ForwardTrace([h], [np.log(f)], f, (h.size, f.size))


class TestCrossEntropy:
    def test_confident_correct(self):
        assert cross_entropy([1 - 1e-15, 1e-15], 0) == pytest.approx(0.0, abs=1e-14)

    def test_uniform(self):
        assert cross_entropy([0.5, 0.5], 0) == pytest.approx(math.log(2), abs=1e-15)

    def test_wrong_class(self):
        assert cross_entropy([0.1, 0.9], 0) == pytest.approx(2.3025850929940455, abs=1e-12)

    def test_clamp(self):
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))

    @pytest.mark.parametrize("y", [-1, 2])
    def test_label_out_of_range(self, y):
        with pytest.raises(ValidationError):
            cross_entropy([0.5, 0.5], y)


class TestFocal:
    def test_hand_case(self):
        assert focal([0.5, 0.5], 0, 2.0) == pytest.approx(0.17328679513998632, abs=1e-12)

    def test_gamma_zero_is_ce(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            f, y, _ = random_trace_inputs(rng)
            assert abs(focal(f, y, 0.0) - cross_entropy(f, y)) <= 1e-15

    def test_downweights_easy_samples(self):
        ps = [0.6, 0.8, 0.95, 0.999]
        ratios = [focal([p, 1 - p], 0, 2.0) / cross_entropy([p, 1 - p], 0) for p in ps]
        assert all(a > b for a, b in zip(ratios, ratios[1:]))

    def test_negative_gamma(self):
        with pytest.raises(ValidationError):
            focal([0.5, 0.5], 0, -1.0)


class TestCBWeights:
    def test_beta_zero_uniform(self):
        np.testing.assert_allclose(cb_weights([5000, 50, 7], 0.0), [1, 1, 1], atol=1e-15)

    def test_equal_counts_uniform(self):
        np.testing.assert_allclose(cb_weights([40, 40, 40, 40], 0.99), np.ones(4), atol=1e-12)

    def test_long_tail_case(self):
        raw = np.array([0.0010067665909753978, 0.020494166910027936])
        w = cb_weights([5000, 50], 0.999)
        np.testing.assert_allclose(w, raw * 2 / raw.sum(), rtol=1e-12)
        assert w[1] > w[0]
        assert w.sum() == pytest.approx(2.0, abs=1e-12)

    def test_single_sample_class(self):
        # pre-rescale weight of a one-sample class is 1 for any beta
        w = cb_weights([1, 1], 0.7)
        np.testing.assert_allclose(w, [1, 1], atol=1e-15)

    @pytest.mark.parametrize("beta", [1.0, 1.5, -0.1])
    def test_bad_beta(self, beta):
        with pytest.raises(ValidationError):
            cb_weights([10, 5], beta)


class TestLambda:
    def test_hand_case(self):
        np.testing.assert_allclose(lambda_weights([100, 10], 1.0).lam, [1 / 11, 10 / 11], atol=1e-15)

    def test_balanced_gives_ones(self):
        np.testing.assert_allclose(lambda_weights([30] * 5, 5.0).lam, np.ones(5), atol=1e-15)

    def test_long_tail_increasing(self):
        counts = [5000, 2997, 1796, 1077, 645, 387, 232, 139, 83, 50]
        lam = lambda_weights(counts, 10.0).lam
        assert np.all(np.diff(lam) > 0)

    def test_zero_count_rejected(self):
        with pytest.raises(ValidationError):
            lambda_weights([10, 0], 1.0)

    def test_sum_is_alpha_random(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            counts = rng.integers(1, 10_000, size=int(rng.integers(2, 20)))
            alpha = float(rng.uniform(0.1, 50))
            assert abs(lambda_weights(counts, alpha).lam.sum() - alpha) <= 1e-12 * max(1.0, alpha)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.integers(1, 100_000), min_size=2, max_size=15))
    def test_antitone(self, counts):
        lam = lambda_weights(counts, 3.0).lam
        c = np.asarray(counts)
        for i in range(len(c)):
            for j in range(len(c)):
                if c[i] < c[j]:
                    assert lam[i] > lam[j]

    def test_default_alpha_is_k(self):
        lam = class_weight_vector(LossSpec("ib"), [30, 30, 30])
        np.testing.assert_allclose(lam, np.ones(3), atol=1e-15)


class TestIBFactor:
    def test_exact_prediction(self):
        assert ib_factor([1.0, 0.0], [1.0, 0.0], [3.0, -2.0]) == 0.0

    def test_hand_case(self):
        assert ib_factor([0.7, 0.3], [1.0, 0.0], [1.0, -1.0, 2.0]) == pytest.approx(2.4, abs=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            ib_factor([0.5, 0.5], [1.0, 0.0, 0.0], [1.0])

    def test_matches_last_layer_gradient(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            f, y, h = random_trace_inputs(rng)
            a = ib_factor(f, one_hot(y, f.size), h)
            assert abs(a - last_layer_grad_l1(trace(f, h), y)) <= 1e-12
            assert abs(a - 2 * (1 - f[y]) * np.abs(h).sum()) <= 1e-12

    def test_other_norms(self):
        f, y1, h = np.array([0.7, 0.3]), np.array([1.0, 0.0]), np.array([1.0, -1.0, 2.0])
        outer = np.outer(f - y1, h)
        assert ib_factor(f, y1, h, "L2") == pytest.approx(np.linalg.norm(outer), rel=1e-14)
        assert ib_factor(f, y1, h, "Linf") == pytest.approx(np.abs(outer).max(), rel=1e-14)
        assert ib_factor(f, y1, h, "none") == 0.0


class TestIBLoss:
    def test_exact_prediction_zero_loss(self):
        loss, weight = ib_loss([1.0, 0.0], 0, [1.0, 2.0], 1.0)
        assert loss == 0.0 and weight == pytest.approx(1000.0)

    def test_hand_case(self):
        loss, weight = ib_loss([0.7, 0.3], 0, [1.0, -1.0, 2.0], 1.0, 1e-3)
        assert weight == pytest.approx(0.41649312786339027, abs=1e-12)
        assert loss == pytest.approx(0.14855266303154205, abs=1e-12)

    def test_larger_h_smaller_weight(self):
        _, w1 = ib_loss([0.7, 0.3], 0, [1.0, -1.0, 2.0], 1.0)
        _, w2 = ib_loss([0.7, 0.3], 0, [2.0, -2.0, 4.0], 1.0)
        assert w2 < w1

    @settings(max_examples=200, deadline=None)
    @given(
        p=st.floats(0.01, 0.99), s1=st.floats(0.01, 10), s2=st.floats(0.01, 10),
        lam=st.floats(0.01, 10), eps=st.floats(1e-8, 1e-1),
    )
    def test_weight_decreasing_in_factor(self, p, s1, s2, lam, eps):
        if math.isclose(s1, s2):
            return
        lo, hi = sorted((s1, s2))
        _, w_lo = ib_loss([p, 1 - p], 0, [lo], lam, eps)
        _, w_hi = ib_loss([p, 1 - p], 0, [hi], lam, eps)
        assert w_hi < w_lo

    @pytest.mark.parametrize("lam, eps", [(0.0, 1e-3), (1.0, 0.0)])
    def test_rejects_non_positive(self, lam, eps):
        with pytest.raises(ValidationError):
            ib_loss([0.5, 0.5], 0, [1.0], lam, eps)


def _batch():
    rng = np.random.default_rng(12)
    out = []
    for y in (0, 1, 2, 1):
        z = rng.normal(size=3)
        out.append((trace(stable_softmax(z), rng.normal(size=4)), y))
    return out


def _hand_ib(batch, lam, eps, base):
    total = 0.0
    for tr, y in batch:
        f, h = tr.probs.tolist(), tr.h.tolist()
        factor = sum(abs(f[k] - (1.0 if k == y else 0.0)) for k in range(len(f))) * sum(abs(v) for v in h)
        total += lam[y] / (factor + eps) * base(f, y)
    return total / len(batch)


class TestBatchLoss:
    def test_single_sample(self):
        b = _batch()[:1]
        mean, _ = batch_loss(LossSpec("ce"), None, b)
        assert mean == pytest.approx(cross_entropy(b[0][0].probs, 0), abs=1e-15)

    def test_ce_mean_of_two(self):
        b = _batch()[:2]
        a, c = cross_entropy(b[0][0].probs, 0), cross_entropy(b[1][0].probs, 1)
        assert batch_loss(LossSpec("ce"), None, b)[0] == pytest.approx((a + c) / 2, abs=1e-15)

    def test_ib_hand_summed(self):
        b = _batch()
        counts = [100, 20, 5]
        lam = [3 * (1 / n) / sum(1 / m for m in counts) for n in counts]
        expected = _hand_ib(b, lam, 1e-3, lambda f, y: -math.log(f[y]))
        spec = LossSpec("ib")
        mean, weights = batch_loss(spec, class_weight_vector(spec, counts), b)
        assert mean == pytest.approx(expected, rel=1e-12)
        assert weights.shape == (4,)

    def test_ib_cb_uses_cb_weights(self):
        b = _batch()
        counts = [100, 20, 5]
        spec = LossSpec("ib_cb", beta=0.99)
        cw = cb_weights(counts, 0.99)
        expected = _hand_ib(b, cw, 1e-3, lambda f, y: -math.log(f[y]))
        assert batch_loss(spec, class_weight_vector(spec, counts), b)[0] == pytest.approx(expected, rel=1e-12)

    def test_ib_focal_uses_lambda_and_focal(self):
        b = _batch()
        counts = [100, 20, 5]
        lam = [3 * (1 / n) / sum(1 / m for m in counts) for n in counts]
        expected = _hand_ib(b, lam, 1e-3, lambda f, y: (1 - f[y]) ** 2 * -math.log(f[y]))
        spec = LossSpec("ib_focal", gamma=2.0)
        assert batch_loss(spec, class_weight_vector(spec, counts), b)[0] == pytest.approx(expected, rel=1e-12)

    def test_cb(self):
        b = _batch()
        cw = cb_weights([100, 20, 5], 0.9)
        expected = np.mean([cw[y] * cross_entropy(t.probs, y) for t, y in b])
        assert batch_loss(LossSpec("cb", beta=0.9), cw, b)[0] == pytest.approx(expected, rel=1e-12)

    def test_empty(self):
        with pytest.raises(ValidationError):
            batch_loss(LossSpec("ce"), None, [])

    def test_missing_weights(self):
        with pytest.raises(ValidationError):
            batch_loss(LossSpec("ib"), None, _batch())

    @pytest.mark.parametrize("kind", ["ce", "focal", "cb", "ib", "ib_focal", "ib_cb"])
    def test_permutation_invariant(self, kind):
        b = _batch()
        spec = LossSpec(kind, gamma=1.5, beta=0.9)
        cw = class_weight_vector(spec, [100, 20, 5])
        base, _ = batch_loss(spec, cw, b)
        rng = np.random.default_rng(0)
        for _ in range(10):
            perm = rng.permutation(len(b))
            assert abs(batch_loss(spec, cw, [b[i] for i in perm])[0] - base) <= 1e-12

    def test_renormalize_mean_one(self):
        spec = LossSpec("ib", renormalize=True)
        _, w = batch_loss(spec, class_weight_vector(spec, [100, 20, 5]), _batch())
        assert w.mean() == pytest.approx(1.0, abs=1e-14)


class TestLogitGradient:
    @pytest.mark.parametrize("kind, gamma", [("ce", 0.0), ("focal", 0.0), ("focal", 0.5), ("focal", 2.0)])
    def test_matches_finite_differences(self, kind, gamma):
        rng = np.random.default_rng(8)
        spec = LossSpec(kind, gamma=gamma)
        for _ in range(20):
            z = rng.normal(scale=2, size=4)
            y = int(rng.integers(4))
            _, _, d = sample_terms(spec, None, stable_softmax(z), [y], np.ones((1, 3)))
            num = np.zeros(4)
            for k in range(4):
                e = np.zeros(4)
                e[k] = 1e-6
                num[k] = (focal(stable_softmax(z + e), y, gamma) - focal(stable_softmax(z - e), y, gamma)) / 2e-6
            np.testing.assert_allclose(d[0], num, rtol=1e-6, atol=1e-8)

    def test_ib_gradient_is_weighted_ce(self):
        rng = np.random.default_rng(2)
        f, y, h = random_trace_inputs(rng, K=3, L=4)
        spec = LossSpec("ib")
        lam = class_weight_vector(spec, [50, 10, 5])
        _, w, d = sample_terms(spec, lam, f, [y], h)
        np.testing.assert_allclose(d[0], w[0] * (f - one_hot(y, 3)), atol=1e-14)


class TestLossSpec:
    @pytest.mark.parametrize(
        "kwargs",
        [{"kind": "ldam"}, {"kind": "focal", "gamma": -1}, {"kind": "cb", "beta": 1.0},
         {"kind": "ib", "alpha": 0}, {"kind": "ib", "epsilon": 0}, {"kind": "ib", "norm": "L3"}],
    )
    def test_rejects(self, kwargs):
        with pytest.raises(ValidationError):
            LossSpec(**kwargs)
