import numpy as np
import pytest

from robustdiff import nn_core
from robustdiff.nn_core import (
    MlpTape,
    NonFiniteError,
    OptState,
    ParamBundle,
    ShapeError,
    Var,
    adam_step,
    grad,
    init_params,
    load_params,
    mlp_forward,
    save_params,
    value_and_grad,
    vmean,
    vmul,
    vsquare,
    vsub,
    vsum,
)


def hand_forward(params, x, activation):
    """Independent loop-based forward pass used as the oracle."""
    h = list(x)
    for k in range(params.n_layers):
        w, b = params.layer(k)
        out = []
        for j in range(w.shape[1]):
            acc = b[j]
            for i in range(w.shape[0]):
                acc += h[i] * w[i, j]
            out.append(acc)
        if k < params.n_layers - 1:
            if activation == "silu":
                out = [v / (1.0 + np.exp(-v)) for v in out]
            else:
                out = [np.tanh(v) for v in out]
        h = out
    return np.array(h)


def fd_gradient(params, loss_fn, h=1e-4):
    base = params.values.copy()
    out = np.zeros_like(base)
    for i in range(base.size):
        params.values[i] = base[i] + h
        vp = loss_fn(MlpTape(params)).value
        params.values[i] = base[i] - h
        vm = loss_fn(MlpTape(params)).value
        params.values[i] = base[i]
        out[i] = (vp - vm) / (2.0 * h)
    return out


def max_rel_err(a, b):
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return float(np.max(np.abs(a - b) / scale))


class TestMlpForward:
    def test_identity_layer(self):
        params = ParamBundle([(2, 2)], np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
        out = mlp_forward(params, np.array([1.0, 2.0]))
        assert np.array_equal(out, np.array([1.0, 2.0]))

    def test_constant_bias_layer(self):
        # zero weights, bias 0.5: every input maps to 0.5
        params = ParamBundle([(3, 1)], np.array([0.0, 0.0, 0.0, 0.5]))
        for x in ([1.0, 2.0, 3.0], [-4.0, 0.0, 9.0]):
            assert mlp_forward(params, np.array(x)) == pytest.approx(0.5)

    @pytest.mark.parametrize("activation", ["silu", "tanh"])
    def test_two_layer_matches_hand_oracle(self, activation):
        rng = np.random.default_rng(11)
        params = init_params([(3, 5), (5, 2)], seed=4)
        params.values[:] = rng.normal(0, 0.7, params.values.size)
        x = rng.normal(size=3)
        got = mlp_forward(params, x, activation)
        want = hand_forward(params, x, activation)
        assert np.allclose(got, want, rtol=1e-12, atol=0)

    def test_dimension_mismatch_rejected(self):
        params = init_params([(3, 2)], seed=0)
        with pytest.raises(ShapeError):
            mlp_forward(params, np.zeros(4))

    def test_pure_function_bitwise(self):
        params = init_params([(4, 8), (8, 2)], seed=1)
        x = np.random.default_rng(2).normal(size=(6, 4))
        a = mlp_forward(params, x)
        b = mlp_forward(params, x)
        assert np.array_equal(a, b)

    def test_batched_matches_per_row(self):
        params = init_params([(3, 4), (4, 2)], seed=9)
        x = np.random.default_rng(3).normal(size=(5, 3))
        batched = mlp_forward(params, x)
        rows = np.stack([mlp_forward(params, r) for r in x])
        assert np.allclose(batched, rows, rtol=1e-14)


class TestGrad:
    def test_square_loss_scalar_param(self):
        # loss = w^2 at w = 3 -> d/dw = 6
        params = ParamBundle([(1, 1)], np.array([3.0, 0.0]))
        g = grad(params, lambda t: vsum(vmul(t.leaves[0][0], t.leaves[0][0])))
        assert g[0] == pytest.approx(6.0)
        assert g[1] == 0.0

    def test_constant_loss_zero_gradient(self):
        params = init_params([(2, 3), (3, 1)], seed=5)
        g = grad(params, lambda t: Var(np.float64(0.0)))
        assert np.array_equal(g, np.zeros_like(params.values))

    def test_mlp_mse_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        params = init_params([(3, 6), (6, 6), (6, 2)], seed=7)
        x = rng.normal(size=(4, 3))
        target = rng.normal(size=(4, 2))

        def loss_fn(tape):
            out = tape.forward(x, "silu")
            return vmean(vsquare(vsub(out, Var(target))))

        val, g = value_and_grad(params, loss_fn)
        fd = fd_gradient(params, loss_fn)
        assert max_rel_err(g, fd) < 1e-4

    def test_primitive_grads_property(self):
        # randomized agreement with central finite differences, >= 100 trials
        rng = np.random.default_rng(42)
        builders = [
            lambda t, x, y: vmean(vsquare(vsub(t.forward(x, "silu"), Var(y)))),
            lambda t, x, y: vmean(vsquare(vsub(t.forward(x, "tanh"), Var(y)))),
            lambda t, x, y: vsum(vmul(t.forward(x, "silu"), Var(y))),
            lambda t, x, y: vmean(vmul(t.forward(x, "tanh"), t.forward(x, "tanh"))),
        ]
        for trial in range(100):
            shapes = [(2, 3), (3, 2)] if trial % 2 else [(2, 4), (4, 4), (4, 1)]
            params = init_params(shapes, seed=trial)
            params.values[:] += rng.normal(0, 0.2, params.values.size)
            x = rng.normal(size=(3, 2))
            y = rng.normal(size=(3, shapes[-1][1]))
            fn = builders[trial % len(builders)]
            loss_fn = lambda tape: fn(tape, x, y)
            _, g = value_and_grad(params, loss_fn)
            fd = fd_gradient(params, loss_fn)
            assert max_rel_err(g, fd) < 1e-4, f"trial {trial}"

    def test_nonfinite_intermediate_names_layer(self):
        params = init_params([(2, 2), (2, 1)], seed=0)
        params.values[0] = 1e308
        params.values[1] = 1e308
        x = np.full((1, 2), 1e308)
        with pytest.raises(NonFiniteError, match="layer 0"):
            grad(params, lambda t: vsum(t.forward(x, "silu", check_finite=True)))


class TestAdam:
    def test_zero_gradient_fresh_state_keeps_params(self):
        params = init_params([(2, 2)], seed=3)
        before = params.values.copy()
        new_params, state = adam_step(params, np.zeros_like(before), OptState.fresh(params))
        assert np.array_equal(new_params.values, before)
        assert state.step_count == 1

    def test_zero_gradient_any_state_keeps_params(self):
        params = init_params([(2, 2)], seed=3)
        rng = np.random.default_rng(0)
        state = OptState(rng.normal(size=params.values.size) ** 2,
                         rng.normal(size=params.values.size) ** 2, 17)
        before = params.values.copy()
        new_params, _ = adam_step(params, np.zeros_like(before), state)
        assert np.array_equal(new_params.values, before)

    def test_first_step_hand_value(self):
        # g = 1, lr = 1e-3: m_hat = v_hat = 1 -> delta = lr / (1 + eps)
        params = ParamBundle([(1, 1)], np.array([0.25, 0.0]))
        g = np.array([1.0, 0.0])
        new_params, state = adam_step(params, g, OptState.fresh(params),
                                      lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8)
        expected = 0.25 - 1e-3 * 1.0 / (np.sqrt(1.0) + 1e-8)
        assert new_params.values[0] == pytest.approx(expected, rel=1e-15)
        assert state.step_count == 1

    def test_two_constant_steps_match_hand_recursion(self):
        lr, b1, b2, eps = 1e-3, 0.9, 0.999, 1e-8
        params = ParamBundle([(1, 1)], np.array([1.0, 0.0]))
        g = np.array([0.5, 0.0])
        p1, s1 = adam_step(params, g, OptState.fresh(params), lr, b1, b2, eps)
        p2, s2 = adam_step(p1, g, s1, lr, b1, b2, eps)
        # hand recursion
        m1 = (1 - b1) * 0.5
        v1 = (1 - b2) * 0.25
        theta1 = 1.0 - lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
        m2 = b1 * m1 + (1 - b1) * 0.5
        v2 = b2 * v1 + (1 - b2) * 0.25
        theta2 = theta1 - lr * (m2 / (1 - b1**2)) / (np.sqrt(v2 / (1 - b2**2)) + eps)
        assert p1.values[0] == pytest.approx(theta1, rel=1e-15)
        assert p2.values[0] == pytest.approx(theta2, rel=1e-15)
        assert s2.step_count == 2

    def test_nonfinite_gradient_rejected_params_untouched(self):
        params = init_params([(2, 1)], seed=1)
        before = params.values.copy()
        bad = np.full(params.values.size, np.nan)
        with pytest.raises(NonFiniteError):
            adam_step(params, bad, OptState.fresh(params))
        assert np.array_equal(params.values, before)

    def test_gradient_length_mismatch(self):
        params = init_params([(2, 1)], seed=1)
        with pytest.raises(ShapeError):
            adam_step(params, np.zeros(2), OptState.fresh(params))

    def test_zero_grad_noop_property(self):
        rng = np.random.default_rng(5)
        for trial in range(25):
            params = init_params([(2, 3)], seed=trial)
            state = OptState(rng.normal(size=9) ** 2, rng.normal(size=9) ** 2,
                             int(rng.integers(0, 100)))
            before = params.values.copy()
            new_params, new_state = adam_step(params, np.zeros(9), state)
            assert np.array_equal(new_params.values, before)
            assert new_state.step_count == state.step_count + 1


class TestParamBundle:
    def test_count_invariant_enforced(self):
        with pytest.raises(ShapeError):
            ParamBundle([(2, 2)], np.zeros(5))

    def test_nonfinite_values_rejected(self):
        vals = np.zeros(6)
        vals[3] = np.inf
        with pytest.raises(NonFiniteError):
            ParamBundle([(2, 2)], vals)

    def test_layer_views_share_memory(self):
        params = init_params([(2, 2), (2, 1)], seed=0)
        w, b = params.layer(0)
        w[0, 0] = 123.0
        assert params.values[0] == 123.0


class TestCheckpointIO:
    def test_round_trip_bitwise(self, tmp_path):
        params = init_params([(3, 5), (5, 2)], seed=13)
        params.values[:] = np.random.default_rng(1).normal(size=params.values.size)
        path = tmp_path / "model.ckpt"
        save_params(path, params)
        loaded = load_params(path)
        assert loaded.layer_shapes == params.layer_shapes
        assert np.array_equal(loaded.values, params.values)
        # a second save of the loaded bundle produces identical bytes
        path2 = tmp_path / "model2.ckpt"
        save_params(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint\n")
        with pytest.raises(ValueError):
            load_params(path)
