import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncertainty_da.autograd import Tensor
from uncertainty_da.models import ModelBundle, default_specs
from uncertainty_da.uncertainty import (
    adaptive_weights,
    entropy_of,
    mc_predict,
    minmax_normalize,
    variance_of,
)

from oracles import brute_entropy, brute_mc_stats, brute_variance


def _bundle(p=0.5, seed=0, d_in=3, C=4):
    return ModelBundle.build(default_specs(d_in, C, 1, (8, 6), (4,), p), seed=seed)


class TestEntropyOf:
    def test_one_hot(self):
        assert entropy_of([0.0, 1.0, 0.0]) == 0.0

    def test_uniform(self):
        assert entropy_of([0.25] * 4) == pytest.approx(1.38629, abs=1e-5)

    def test_two_of_four(self):
        assert entropy_of([0.5, 0.5, 0.0, 0.0]) == pytest.approx(0.69315, abs=1e-5)

    def test_malformed(self):
        with pytest.raises(ValueError):
            entropy_of([0.5, 0.6])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 8), st.integers(0, 2**31))
    def test_bounded_and_max_at_uniform(self, C, seed):
        rng = np.random.default_rng(seed)
        p = rng.dirichlet(np.ones(C))
        h = entropy_of(p)
        assert -1e-15 <= h <= math.log(C) + 1e-12
        assert entropy_of(np.full(C, 1.0 / C)) >= h - 1e-12


class TestVarianceOf:
    def test_identical_passes(self):
        assert variance_of([[1.0, 2.0]] * 5) == 0.0

    def test_hand_example(self):
        assert variance_of([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.25)

    def test_against_loops(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.normal(size=(rng.integers(1, 10), rng.integers(2, 6)))
            assert variance_of(a) == pytest.approx(brute_variance(a.tolist()), abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=(7, 3))
        assert variance_of(a[rng.permutation(7)]) == pytest.approx(variance_of(a), abs=1e-12)


class TestAdaptiveWeights:
    def test_single_sample(self):
        assert adaptive_weights([0.1], 0.2).weights.tolist() == [1.0]

    def test_above_threshold_dropped(self):
        w = adaptive_weights([0.1, 0.3], 0.2)
        assert w.weights.tolist() == [1.0, 0.0]
        assert w.survivor_count == 1

    def test_closed_form(self):
        w = adaptive_weights([0.1, 0.2], 0.2).weights
        a, b = math.exp(-0.1), math.exp(-0.2)
        expected = [2 * a / (a + b), 2 * b / (a + b)]  # [1.049958, 0.950042]
        np.testing.assert_allclose(w, expected, atol=1e-12)

    def test_no_survivors(self):
        w = adaptive_weights([0.5, 0.9], 0.2)
        assert w.survivor_count == 0
        assert not w.weights.any()

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=40), st.floats(0.0, 1.0))
    def test_properties(self, u, t_u):
        u = np.array(u)
        res = adaptive_weights(u, t_u)
        w = res.weights
        assert (w >= 0).all()
        assert (w[u > t_u] == 0).all()
        assert res.survivor_count == int((u <= t_u).sum())
        if res.survivor_count:
            assert w.sum() == pytest.approx(res.survivor_count, abs=1e-9)
            assert (w[u <= t_u] > 0).all()
        surv = np.flatnonzero(u <= t_u)
        for i in surv:
            for j in surv:
                if u[i] < u[j] and np.exp(-u[i]) > np.exp(-u[j]):
                    assert w[i] > w[j]


def test_minmax_constant_is_zero():
    np.testing.assert_array_equal(minmax_normalize([0.4, 0.4]), [0.0, 0.0])


class TestMCPredict:
    def test_no_dropout_passes_identical(self):
        pred = mc_predict(_bundle(p=0.0), np.random.default_rng(0).normal(size=(5, 3)), 6, 1.5)
        assert np.ptp(pred.pass_logits, axis=0).max() == 0.0
        np.testing.assert_array_equal(pred.variance_u, 0.0)

    def test_single_pass(self):
        b = _bundle()
        x = np.random.default_rng(1).normal(size=(4, 3))
        pred = mc_predict(b, x, 1, 2.0, step=3)
        logits = b.classify(b.extract_features(Tensor(x), "mc_eval", 3, 0), "mc_eval", 3, 0).data
        z = logits / 2.0
        e = np.exp(z - z.max(axis=1, keepdims=True))
        np.testing.assert_allclose(pred.mean_probs, e / e.sum(axis=1, keepdims=True), atol=1e-14)

    def test_matches_brute_force(self):
        b = _bundle()
        x = np.random.default_rng(2).normal(size=(6, 3))
        pred = mc_predict(b, x, 12, 1.5, step=7)
        means, ents, vars_ = brute_mc_stats(pred.pass_logits.tolist(), 1.5)
        np.testing.assert_allclose(pred.mean_probs, means, atol=1e-12)
        np.testing.assert_allclose(pred.entropy_u, ents, atol=1e-12)
        np.testing.assert_allclose(pred.variance_u, vars_, atol=1e-12)

    def test_passes_match_single_forward(self):
        b = _bundle()
        x = np.random.default_rng(3).normal(size=(5, 3))
        pred = mc_predict(b, x, 4, 1.5, step=2)
        for t in range(4):
            single = b.classify(b.extract_features(Tensor(x), "mc_eval", 2, t), "mc_eval", 2, t).data
            np.testing.assert_allclose(pred.pass_logits[t], single, atol=1e-12)

    def test_invariants(self):
        b = _bundle(C=5)
        pred = mc_predict(b, np.random.default_rng(4).normal(size=(20, 3)), 12, 1.5)
        np.testing.assert_allclose(pred.mean_probs.sum(axis=1), 1.0, atol=1e-9)
        assert (pred.entropy_u >= 0).all() and (pred.entropy_u <= math.log(5) + 1e-12).all()
        assert (pred.variance_u >= 0).all()
        assert ((pred.normalized_entropy >= 0) & (pred.normalized_entropy <= 1 + 1e-12)).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(5)
        logits = rng.normal(size=(12, 3, 4))
        a = brute_mc_stats(logits.tolist(), 1.5)
        b = brute_mc_stats((logits + 3.7).tolist(), 1.5)
        np.testing.assert_allclose(a[1], b[1], atol=1e-12)
        np.testing.assert_allclose(a[2], b[2], atol=1e-12)

    def test_rejects_zero_passes(self):
        with pytest.raises(ValueError):
            mc_predict(_bundle(), np.zeros((2, 3)), 0, 1.5)
