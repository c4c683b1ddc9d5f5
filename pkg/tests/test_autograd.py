import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncertainty_da import autograd as ag
from uncertainty_da.autograd import DropoutSpec, Tensor
from uncertainty_da.optim import SGD, sgd_step

from oracles import central_difference, rel_error


def _check_grad(build, shapes, seed=0, positive=False):
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.1, 2.0, s) if positive else rng.normal(size=s) for s in shapes]

    def value():
        return build(*[Tensor(a) for a in arrays]).item()

    params = [ag.parameter(a.copy()) for a in arrays]
    build(*params).backward()
    numeric = central_difference(value, arrays)
    for p, n in zip(params, numeric):
        assert rel_error(p.grad, n) <= 1e-4


class TestDense:
    def test_identity(self):
        out = ag.dense_forward(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_hand_multiply(self):
        out = ag.dense_forward(Tensor([[1.0, 2.0]]), Tensor([[1.0, 1.0], [1.0, -1.0]]), Tensor([0.5, 0.5]))
        np.testing.assert_allclose(out.data, [[3.5, -0.5]])

    def test_zero_input(self):
        w = np.random.default_rng(1).normal(size=(4, 5))
        out = ag.dense_forward(Tensor(np.zeros((3, 4))), Tensor(w), Tensor(np.zeros(5)))
        np.testing.assert_array_equal(out.data, np.zeros((3, 5)))

    def test_shape_mismatch(self):
        with pytest.raises(ag.ShapeError):
            ag.dense_forward(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))), Tensor(np.ones(2)))

    def test_non_finite_rejected(self):
        with pytest.raises(ag.NonFiniteError):
            Tensor([[np.nan, 1.0]])

    def test_gradient(self):
        _check_grad(lambda x, w, b: ag.total(ag.mul(ag.dense_forward(x, w, b), ag.dense_forward(x, w, b))),
                    [(3, 4), (4, 2), (2,)])


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_all_negative(self):
        np.testing.assert_array_equal(ag.relu(Tensor([-3.0, -0.1])).data, [0, 0])

    def test_upstream_gradient(self):
        x = ag.parameter([0.5])
        ag.total(ag.scale(ag.relu(x), 3.0)).backward()
        assert x.grad[0] == pytest.approx(3.0)

    def test_zero_has_zero_gradient(self):
        x = ag.parameter([0.0])
        ag.total(ag.relu(x)).backward()
        assert x.grad[0] == 0.0


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(ag.softmax_temp(Tensor([[0.0, 0.0]]), 1.0).data, [[0.5, 0.5]])

    def test_closed_form(self):
        np.testing.assert_allclose(ag.softmax_temp(Tensor([[1.0, 0.0]]), 1.0).data,
                                   [[0.73106, 0.26894]], atol=1e-5)

    def test_flattening(self):
        np.testing.assert_allclose(ag.softmax_temp(Tensor([[1.0, 0.0]]), 1e6).data, [[0.5, 0.5]], atol=1e-5)

    def test_bad_temperature(self):
        with pytest.raises(ValueError):
            ag.softmax_temp(Tensor([[1.0, 0.0]]), 0.0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.05, 20.0))
    def test_rows_sum_to_one(self, seed, tau):
        logits = np.random.default_rng(seed).normal(scale=3.0, size=(5, 4))
        p = ag.softmax_temp(Tensor(logits), tau).data
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


class TestCrossEntropy:
    def test_one_hot(self):
        assert ag.cross_entropy(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == pytest.approx(0.0)

    def test_uniform(self):
        assert ag.cross_entropy(Tensor(np.full((3, 4), 0.25)), [0, 1, 2]).item() == pytest.approx(1.38629, abs=1e-5)

    def test_closed_form(self):
        assert ag.cross_entropy(Tensor([[0.73106, 0.26894]]), [1]).item() == pytest.approx(1.31326, abs=1e-5)

    def test_label_range(self):
        with pytest.raises(ValueError):
            ag.cross_entropy(Tensor([[0.5, 0.5]]), [2])

    def test_log_clamp(self):
        assert ag.cross_entropy(Tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(-np.log(1e-12))


class TestBackward:
    def test_sum_of_weights(self):
        w = ag.parameter(np.arange(6.0).reshape(2, 3))
        ag.total(w).backward()
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_accumulates(self):
        rng = np.random.default_rng(3)
        w = ag.parameter(rng.normal(size=(3, 2)))
        x = Tensor(rng.normal(size=(4, 3)))

        def loss():
            return ag.total(ag.relu(ag.matmul(x, w)))

        loss().backward()
        once = w.grad.copy()
        loss().backward()
        np.testing.assert_array_equal(w.grad, 2 * once)

    def test_non_scalar(self):
        with pytest.raises(ag.ShapeError):
            ag.parameter(np.ones(3)).backward()

    def test_two_layer_network(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 4, size=5)

        def build(w1, b1, w2, b2):
            h = ag.relu(ag.dense_forward(Tensor(x), w1, b1))
            return ag.cross_entropy(ag.softmax_temp(ag.dense_forward(h, w2, b2), 1.3), y)

        _check_grad(build, [(3, 6), (6,), (6, 4), (4,)])


class TestGradientReversal:
    def test_zero_coeff(self):
        x = ag.parameter([1.0, 2.0])
        ag.total(ag.scale(ag.gradient_reversal(x, 0.0), 5.0)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_unit_coeff(self):
        x = ag.parameter([1.0, 2.0])
        ag.total(ag.mul(ag.gradient_reversal(x, 1.0), Tensor([3.0, -1.0]))).backward()
        np.testing.assert_array_equal(x.grad, [-3.0, 1.0])

    def test_half_coeff(self):
        x = ag.parameter([0.3, 0.7])
        ag.total(ag.mul(ag.gradient_reversal(x, 0.5), Tensor([2.0, -4.0]))).backward()
        np.testing.assert_array_equal(x.grad, [-1.0, 2.0])

    def test_forward_identity(self):
        x = Tensor([[1.5, -2.0]])
        np.testing.assert_array_equal(ag.gradient_reversal(x, 0.7).data, x.data)


class TestDropout:
    def test_p_zero_identity(self):
        x = Tensor(np.arange(8.0).reshape(2, 4))
        out = ag.dropout(x, DropoutSpec(0.0), ag.TRAIN, 0, 0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_inverted_scaling(self):
        spec = DropoutSpec(0.5, 4)
        # find a key whose mask is exactly [1, 0, 1, 1]
        for step in range(1000):
            if list(ag.dropout_mask((4,), 0.5, 9, 4, step, 0)) == [True, False, True, True]:
                break
        out = ag.dropout(Tensor([2.0, 2.0, 2.0, 2.0]), spec, ag.TRAIN, step, 0, seed=9)
        np.testing.assert_array_equal(out.data, [4.0, 0.0, 4.0, 4.0])

    def test_deterministic(self):
        x = Tensor(np.ones((6, 5)))
        spec = DropoutSpec(0.5, 2)
        a = ag.dropout(x, spec, ag.MC_EVAL, 3, 1, seed=11).data
        b = ag.dropout(x, spec, ag.MC_EVAL, 3, 1, seed=11).data
        c = ag.dropout(x, spec, ag.MC_EVAL, 3, 2, seed=11).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_mc_eval_is_stochastic(self):
        x = Tensor(np.ones((4, 50)))
        out = ag.dropout(x, DropoutSpec(0.5), ag.MC_EVAL, 0, 0).data
        assert (out == 0).any()

    def test_deterministic_mode_disables(self):
        x = Tensor(np.ones((4, 50)))
        np.testing.assert_array_equal(ag.dropout(x, DropoutSpec(0.5), ag.DETERMINISTIC, 0, 0).data, x.data)

    def test_rate_must_be_below_one(self):
        with pytest.raises(ValueError):
            DropoutSpec(1.0)

    def test_stacked_passes_match_single(self):
        x = np.random.default_rng(0).normal(size=(3, 7))
        spec = DropoutSpec(0.5, 1)
        stacked = ag.dropout(Tensor(np.vstack([x, x, x])), spec, ag.TRAIN, 5, [0, 1, 2], seed=2).data
        for t in range(3):
            single = ag.dropout(Tensor(x), spec, ag.TRAIN, 5, t, seed=2).data
            np.testing.assert_array_equal(stacked[3 * t:3 * t + 3], single)

    def test_preserves_expectation(self):
        draws = 20_000
        x = Tensor(np.ones((draws, 4)))
        out = ag.dropout(x, DropoutSpec(0.5), ag.TRAIN, 0, 0).data
        mean = out.mean(axis=0)
        se = out.std(axis=0, ddof=1) / np.sqrt(draws)
        assert np.all(np.abs(mean - 1.0) <= 3 * se)


class TestSGD:
    def test_plain_step(self):
        p = ag.parameter([1.0])
        p.grad = np.array([1.0])
        opt = SGD([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([p], opt)
        assert p.data[0] == pytest.approx(0.9)
        assert p.grad is None

    def test_momentum_two_steps(self):
        p = ag.parameter([0.0])
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        for _ in range(2):
            p.grad = np.array([1.0])
            opt.step()
        assert p.data[0] == pytest.approx(-0.29)

    def test_decay_only(self):
        p = ag.parameter([2.0])
        p.grad = np.array([0.0])
        SGD([p], lr=1.0, momentum=0.0, weight_decay=0.01).step()
        assert p.data[0] == pytest.approx(1.98)

    def test_missing_grad(self):
        with pytest.raises(ValueError):
            SGD([ag.parameter([1.0])]).step()

    def test_decay_stays_out_of_velocity(self):
        p = ag.parameter([1.0])
        opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.5)
        for _ in range(2):
            p.grad = np.array([0.0])
            opt.step()
        # each step shrinks by (1 - lr * wd) with nothing carried over
        assert p.data[0] == pytest.approx(0.95 ** 2)
        assert opt.velocity[0][0] == 0.0
