import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowvi.nn import (
    AdamState,
    Mlp,
    MomentumSgdState,
    adam_step,
    cosine_epsilon,
    mlp_apply,
    mlp_grad,
    momentum_sgd_step,
)


class TestMlpApply:
    def test_zero_net_zero_logits(self):
        net = Mlp([3, 5, 2])
        assert np.all(mlp_apply(net, np.array([1.0, -2.0, 0.5])) == 0.0)

    def test_identity_linear_layer(self):
        net = Mlp([4, 4])
        net.params[: 16] = np.eye(4).ravel()
        x = np.array([0.3, -1.2, 4.0, 0.0])
        assert np.allclose(mlp_apply(net, x), x)

    def test_golden_regression(self):
        net = Mlp([4, 6, 3], rng=np.random.default_rng(2024))
        out = mlp_apply(net, np.array([0.5, -1.0, 0.25, 2.0]))
        golden = np.array([-0.30356215, -0.04469599, -0.17685792])
        assert np.allclose(out, golden, atol=1e-8)

    def test_dimension_mismatch(self):
        net = Mlp([3, 2])
        with pytest.raises(ValueError):
            mlp_apply(net, np.zeros(4))

    def test_batch_matches_single(self):
        net = Mlp([3, 8, 2], rng=np.random.default_rng(0))
        X = np.random.default_rng(1).normal(size=(5, 3))
        batch = net.forward(X)
        for i in range(5):
            assert np.allclose(batch[i], net.forward(X[i]))


class TestMlpGrad:
    def test_zero_upstream(self):
        net = Mlp([3, 4, 2], rng=np.random.default_rng(0))
        grad, dx = mlp_grad(net, np.ones(3), np.zeros(2))
        assert np.all(grad == 0.0) and np.all(dx == 0.0)

    def test_linear_bias_grad_is_upstream(self):
        net = Mlp([3, 2], rng=np.random.default_rng(0))
        upstream = np.array([0.7, -0.2])
        grad, _ = mlp_grad(net, np.array([1.0, 2.0, 3.0]), upstream)
        assert np.allclose(grad[6:], upstream)  # bias block follows the 3x2 weights

    def test_finite_differences(self):
        rng = np.random.default_rng(42)
        net = Mlp([5, 8, 7, 3], rng=rng)
        x = rng.normal(size=5)
        upstream = rng.normal(size=3)
        grad, _ = mlp_grad(net, x, upstream)
        h = 1e-5
        fd = np.empty_like(grad)
        for i in range(net.n_params):
            net.params[i] += h
            up = float(upstream @ net.forward(x))
            net.params[i] -= 2 * h
            dn = float(upstream @ net.forward(x))
            net.params[i] += h
            fd[i] = (up - dn) / (2 * h)
        scale = np.maximum(np.abs(fd), 1.0)
        assert np.max(np.abs(grad - fd) / scale) < 1e-4

    def test_input_grad_finite_differences(self):
        rng = np.random.default_rng(3)
        net = Mlp([4, 6, 2], rng=rng)
        x = rng.normal(size=4)
        upstream = rng.normal(size=2)
        _, dx = mlp_grad(net, x, upstream)
        h = 1e-6
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (upstream @ net.forward(xp) - upstream @ net.forward(xm)) / (2 * h)
            assert abs(dx[i] - fd) < 1e-6


class TestAdam:
    def test_zero_gradient_noop(self):
        state = AdamState.init(4, lr=0.1)
        params = np.array([1.0, -2.0, 0.0, 3.0])
        new, state2, skipped = adam_step(state, params, np.zeros(4))
        assert not skipped
        assert np.allclose(new, params)

    def test_first_step_magnitude(self):
        state = AdamState.init(3, lr=0.05)
        params = np.zeros(3)
        g = np.array([10.0, -0.3, 1e-3])
        new, _, _ = adam_step(state, params, g)
        # first-step update is lr * g/(|g| + eps) ~= lr * sign(g)
        assert np.allclose(np.abs(new), 0.05, rtol=1e-4)
        assert np.all(np.sign(new) == -np.sign(g))

    def test_deterministic(self):
        state = AdamState.init(3, lr=0.01)
        params = np.array([1.0, 2.0, 3.0])
        g = np.array([0.1, -0.5, 0.2])
        out1 = adam_step(state, params, g)
        out2 = adam_step(state, params, g)
        assert np.array_equal(out1[0], out2[0])
        assert out1[1].step == out2[1].step == 1

    def test_nonfinite_skipped(self):
        state = AdamState.init(2, lr=0.1)
        params = np.ones(2)
        new, state2, skipped = adam_step(state, params, np.array([np.nan, 1.0]))
        assert skipped
        assert new is params and state2 is state

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.init(2, 0.1), np.ones(3), np.ones(3))


class TestMomentumSgd:
    def test_plain_sgd(self):
        state = MomentumSgdState.init(2, lr=0.5)
        new, _, _ = momentum_sgd_step(state, np.array([1.0, 1.0]), np.array([1.0, -2.0]))
        assert np.allclose(new, [0.5, 2.0])

    def test_momentum_accumulates(self):
        state = MomentumSgdState.init(1, lr=1.0, momentum=0.8)
        params = np.zeros(1)
        g = np.ones(1)
        params, state, _ = momentum_sgd_step(state, params, g)
        assert params[0] == -1.0
        params, state, _ = momentum_sgd_step(state, params, g)
        assert params[0] == pytest.approx(-1.0 - 1.8)


class TestCosineEpsilon:
    def test_endpoints(self):
        assert cosine_epsilon(2.0, 0, 100) == 2.0
        assert cosine_epsilon(2.0, 100, 100) == pytest.approx(0.0, abs=1e-15)
        assert cosine_epsilon(2.0, 250, 100) == pytest.approx(0.0, abs=1e-15)

    def test_midpoint(self):
        assert cosine_epsilon(2.0, 50, 100) == pytest.approx(1.0)

    @given(st.floats(0, 10), st.integers(0, 500), st.integers(1, 300))
    def test_bounds_and_monotone(self, eps, t, t_max):
        val = cosine_epsilon(eps, t, t_max)
        assert 0.0 <= val <= eps + 1e-12
        assert cosine_epsilon(eps, t + 1, t_max) <= val + 1e-12

    def test_bad_t_max(self):
        with pytest.raises(ValueError):
            cosine_epsilon(1.0, 0, 0)


def test_checkpoint_round_trip():
    net = Mlp([3, 5, 2], rng=np.random.default_rng(9))
    back = Mlp.from_json(net.to_json())
    assert back.sizes == net.sizes
    assert np.array_equal(back.params, net.params)
