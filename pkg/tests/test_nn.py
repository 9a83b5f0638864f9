import math

import numpy as np
import pytest

from balancelab import nn
from conftest import assert_grads_match, central_diff


def rand_dense(rng, n_out, n_in):
    return nn.DenseParams(rng.normal(size=(n_out, n_in)), rng.normal(size=n_out))


def rand_lstm(rng, n_h, n_in):
    kw = {}
    for g in "ifgo":
        kw["W" + g] = rng.normal(size=(n_h, n_in)) * 0.5
        kw["U" + g] = rng.normal(size=(n_h, n_h)) * 0.5
        kw["b" + g] = rng.normal(size=n_h) * 0.5
    return nn.LstmParams(**kw)


class TestFcForward:
    def test_zero_weights_tanh_is_zero(self, rng):
        p = nn.DenseParams(np.zeros((3, 4)), np.zeros(3))
        x = rng.normal(size=4)
        assert np.all(nn.fc_forward(x, p, "tanh") == 0.0)

    def test_identity_linear(self):
        p = nn.DenseParams(np.eye(2), np.zeros(2))
        out = nn.fc_forward(np.array([0.3, -0.2]), p, "linear")
        np.testing.assert_array_equal(out, [0.3, -0.2])

    def test_hand_evaluated_tanh(self):
        # W x + b = 1.0 * 0.5 + 0.5 = 1.0; tanh(1.0) by hand
        p = nn.DenseParams([[1.0]], [0.5])
        out = nn.fc_forward([0.5], p, "tanh")
        assert out[0] == pytest.approx(0.7615941559557649, abs=1e-12)

    def test_dimension_error(self):
        p = nn.DenseParams(np.zeros((2, 3)), np.zeros(2))
        with pytest.raises(nn.DimensionError):
            nn.fc_forward(np.zeros(4), p)

    def test_pure(self, rng):
        p = rand_dense(rng, 3, 5)
        x = rng.normal(size=5)
        a = nn.fc_forward(x, p)
        b = nn.fc_forward(x, p)
        assert np.array_equal(a, b)

    def test_batched_matches_rows(self, rng):
        # gemm vs gemv round-off only
        p = rand_dense(rng, 3, 5)
        xs = rng.normal(size=(4, 5))
        batched = nn.fc_forward(xs, p)
        rows = np.stack([nn.fc_forward(x, p) for x in xs])
        np.testing.assert_allclose(batched, rows, rtol=0, atol=1e-14)


def zero_lstm(n_h, n_in):
    kw = {}
    for g in "ifgo":
        kw["W" + g] = np.zeros((n_h, n_in))
        kw["U" + g] = np.zeros((n_h, n_h))
        kw["b" + g] = np.zeros(n_h)
    return kw


class TestLstmStep:
    def test_all_zero(self):
        p = nn.LstmParams(**zero_lstm(2, 3))
        h, c = nn.lstm_step(np.ones(3), np.zeros(2), np.zeros(2), p)
        assert np.all(h == 0.0) and np.all(c == 0.0)

    def test_zero_params_unit_cell(self):
        # gates all sigmoid(0)=0.5, candidate tanh(0)=0:
        # c = 0.5*1 = 0.5, h = 0.5*tanh(0.5)
        p = nn.LstmParams(**zero_lstm(1, 1))
        h, c = nn.lstm_step([0.7], [0.3], [1.0], p)
        assert c[0] == pytest.approx(0.5, abs=1e-15)
        assert h[0] == pytest.approx(0.5 * math.tanh(0.5), abs=1e-12)
        assert h[0] == pytest.approx(0.23105857863000487, abs=1e-12)

    def test_saturated_forget_gate_preserves_cell(self):
        kw = zero_lstm(1, 1)
        kw["bf"] = np.array([20.0])  # sigmoid(20) ~ 1
        p = nn.LstmParams(**kw)
        _, c = nn.lstm_step([0.0], [0.0], [0.7], p)
        assert c[0] == pytest.approx(0.7, abs=1e-6)

    def test_h_strictly_inside_unit_box(self, rng):
        p = rand_lstm(rng, 6, 4)
        h = np.zeros(6)
        c = np.zeros(6)
        for _ in range(50):
            h, c = nn.lstm_step(rng.normal(size=4) * 3, h, c, p)
            assert np.all(np.abs(h) < 1.0)

    def test_pure(self, rng):
        p = rand_lstm(rng, 3, 2)
        args = (rng.normal(size=2), rng.normal(size=3), rng.normal(size=3))
        h1, c1 = nn.lstm_step(*args, p)
        h2, c2 = nn.lstm_step(*args, p)
        assert np.array_equal(h1, h2) and np.array_equal(c1, c2)


class TestMseLoss:
    def test_equal_is_zero(self, rng):
        x = rng.normal(size=(3, 4))
        assert nn.mse_loss(x, x.copy()) == 0.0

    def test_unit_errors(self):
        assert nn.mse_loss([1.0, 1.0], [0.0, 0.0]) == 1.0

    def test_hand_mean(self):
        # (4 + 0) / 2
        assert nn.mse_loss([2.0, 0.0], [0.0, 0.0]) == 2.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            nn.mse_loss(np.zeros(0), np.zeros(0))

    def test_grad_matches_fd(self, rng):
        pred = rng.normal(size=(2, 3))
        target = rng.normal(size=(2, 3))
        g = nn.mse_loss_grad(pred, target)
        g_fd = central_diff(lambda p: nn.mse_loss(p, target), pred)
        assert_grads_match(g, g_fd)


class TestOptimizers:
    def test_adam_first_step_is_lr_signed(self):
        params = {"w": np.array([1.0])}
        opt = nn.Adam(lr=0.01)
        opt.step(params, {"w": np.array([0.5])})
        # first Adam step is -lr * sign(g) up to eps
        assert params["w"][0] == pytest.approx(1.0 - 0.01, rel=1e-6)

    def test_momentum_zero_is_plain_sgd(self):
        params = {"w": np.array([0.0])}
        opt = nn.MomentumSgd(lr=0.1, momentum=0.0)
        opt.step(params, {"w": np.array([2.0])})
        assert params["w"][0] == pytest.approx(-0.2, abs=1e-15)

    def test_momentum_accumulates(self):
        # v1 = 0.1, v2 = 0.9*0.1 + 0.1 = 0.19
        params = {"w": np.array([0.0])}
        opt = nn.MomentumSgd(lr=0.1, momentum=0.9)
        opt.step(params, {"w": np.array([1.0])})
        first = params["w"][0]
        opt.step(params, {"w": np.array([1.0])})
        assert first == pytest.approx(-0.1, abs=1e-15)
        assert params["w"][0] - first == pytest.approx(-0.19, abs=1e-15)

    def test_non_finite_gradient_rejected(self):
        params = {"w": np.zeros(2)}
        for opt in (nn.Adam(), nn.MomentumSgd()):
            with pytest.raises(nn.NonFiniteGradientError):
                opt.step(params, {"w": np.array([1.0, np.nan])})
        assert np.all(params["w"] == 0.0)

    @pytest.mark.parametrize("make_opt", [lambda: nn.Adam(lr=0.03),
                                          lambda: nn.MomentumSgd(lr=0.05, momentum=0.9)])
    def test_quadratic_convergence(self, make_opt):
        a = np.array([1.0, 2.0, 3.0])
        params = {"x": np.array([1.0, 1.0, 1.0])}
        loss = lambda x: float(0.5 * np.sum(a * x * x))
        initial = loss(params["x"])
        opt = make_opt()
        for _ in range(500):
            opt.step(params, {"x": a * params["x"]})
        assert loss(params["x"]) <= 1e-3 * initial


class TestBackward:
    def test_fc_bias_grad_matches_fd(self, rng):
        # loss = mse(fc(x), 0) with W = 0: only the bias path is active
        p = nn.DenseParams(np.zeros((3, 4)), rng.normal(size=3))
        x = rng.normal(size=(2, 4))
        target = np.zeros((2, 3))

        def run(b):
            out = nn.fc_forward(x, nn.DenseParams(p.W, b), "tanh")
            return nn.mse_loss(out, target)

        y, cache = nn.fc_forward_cache(x, p, "tanh")
        dy = nn.mse_loss_grad(y, target)
        _, _, db = nn.fc_backward(dy, cache, p)
        assert_grads_match(db, central_diff(run, p.b))

    def test_fc_all_grads_match_fd(self, rng):
        p = rand_dense(rng, 3, 5)
        x = rng.normal(size=(4, 5))
        target = rng.normal(size=(4, 3))

        y, cache = nn.fc_forward_cache(x, p, "tanh")
        dy = nn.mse_loss_grad(y, target)
        dx, dW, db = nn.fc_backward(dy, cache, p)

        assert_grads_match(dW, central_diff(
            lambda W: nn.mse_loss(nn.fc_forward(x, nn.DenseParams(W, p.b), "tanh"), target),
            p.W))
        assert_grads_match(db, central_diff(
            lambda b: nn.mse_loss(nn.fc_forward(x, nn.DenseParams(p.W, b), "tanh"), target),
            p.b))
        assert_grads_match(dx, central_diff(
            lambda xv: nn.mse_loss(nn.fc_forward(xv, p, "tanh"), target), x))

    def test_constant_loss_gives_zero_grads(self, rng):
        p = rand_dense(rng, 3, 3)
        x = rng.normal(size=(2, 3))
        y, cache = nn.fc_forward_cache(x, p, "tanh")
        dy = nn.mse_loss_grad(y, y.copy())  # target equals (detached) prediction
        dx, dW, db = nn.fc_backward(dy, cache, p)
        assert np.all(dx == 0.0) and np.all(dW == 0.0) and np.all(db == 0.0)

    def test_lstm_two_step_grads_match_fd(self, rng):
        # single LSTM cell unrolled twice; check every gate parameter
        n_h, n_in = 3, 2
        p = rand_lstm(rng, n_h, n_in)
        xs = rng.normal(size=(2, 1, n_in))
        target = rng.normal(size=(1, n_h))

        def run_with(params):
            h = np.zeros((1, n_h))
            c = np.zeros((1, n_h))
            for t in range(2):
                h, c = nn.lstm_step(xs[t], h, c, params)
            return nn.mse_loss(h, target)

        h = np.zeros((1, n_h))
        c = np.zeros((1, n_h))
        caches = []
        for t in range(2):
            h, c, cache = nn.lstm_step_cache(xs[t], h, c, p)
            caches.append(cache)
        dh = nn.mse_loss_grad(h, target)
        dc = np.zeros_like(c)
        total = None
        for t in (1, 0):
            _, dh, dc, grads = nn.lstm_backward(dh, dc, caches[t], p)
            if total is None:
                total = grads
            else:
                for k in total:
                    total[k] = total[k] + grads[k]

        # per-gate finite differences against the packed analytic grads
        base = p.gates()
        n = p.n_hidden
        gate_slice = {g: slice(k * n, (k + 1) * n) for k, g in enumerate(nn.GATE_NAMES)}
        for name, val in base.items():
            def run_param(v, name=name):
                return run_with(nn.LstmParams(**{**base, name: v}))

            packed, gate = name[0], name[1]
            analytic = total[packed][gate_slice[gate]]
            assert_grads_match(analytic, central_diff(run_param, val), rel=1e-4)

    def test_random_small_configs_fc_and_lstm(self, rng):
        # seeded sweep over small shapes; analytic vs central differences
        for trial in range(10):
            n_in = int(rng.integers(1, 8))
            n_out = int(rng.integers(1, 8))
            p = rand_dense(rng, n_out, n_in)
            x = rng.normal(size=(2, n_in))
            target = rng.normal(size=(2, n_out))
            y, cache = nn.fc_forward_cache(x, p, "tanh")
            _, dW, _ = nn.fc_backward(nn.mse_loss_grad(y, target), cache, p)
            assert_grads_match(dW, central_diff(
                lambda W: nn.mse_loss(nn.fc_forward(x, nn.DenseParams(W, p.b), "tanh"),
                                      target), p.W))
