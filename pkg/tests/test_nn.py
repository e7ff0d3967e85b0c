import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racs.errors import DimensionError, NumericError, RangeError, StaleTapeError
from racs.nn import (AdamState, Conv2d, Dense, MaxPool2, Measurement, Network, Parameters, PinvDecode,
                     ReLU, Reshape, adam_step, backward_pass, cross_entropy_loss, euclidean_loss,
                     forward_pass, grad_check, softmax)


def dense_net(in_dim, out_dim, dtype=np.float64):
    net = Network([Dense("fc", in_dim, out_dim)], (in_dim,))
    net.params = Parameters({"fc.weight": np.eye(out_dim, in_dim, dtype=dtype),
                             "fc.bias": np.zeros(out_dim, dtype=dtype)})
    return net


class TestForward:
    def test_reshape_is_identity(self):
        net = Network([Reshape("r", (2, 3))], (2, 3))
        t = np.random.default_rng(0).standard_normal((4, 2, 3)).astype(np.float32)
        out, _ = forward_pass(net, None, t)
        np.testing.assert_array_equal(out, t)

    def test_identity_dense(self):
        v = np.array([[1.0, -2.0, 3.0]])
        out, _ = forward_pass(dense_net(3, 3), None, v)
        np.testing.assert_array_equal(out, v)

    def test_one_by_one_conv_scales(self):
        net = Network([Conv2d("c", 1, 1, 1)], (1, 33, 33))
        net.params = Parameters({"c.weight": np.full((1, 1, 1, 1), 2.0), "c.bias": np.zeros(1)})
        x = np.random.default_rng(1).random((1, 1, 33, 33))
        out, _ = forward_pass(net, None, x)
        np.testing.assert_array_equal(out, 2.0 * x)

    def test_conv_matches_direct_correlation(self):
        rng = np.random.default_rng(2)
        net = Network([Conv2d("c", 2, 3, 3)], (2, 5, 6)).init(rng, np.float64)
        x = rng.standard_normal((2, 2, 5, 6))
        out, _ = forward_pass(net, None, x)
        W, b = net.params["c.weight"], net.params["c.bias"]
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for i in range(5):
            for j in range(6):
                patch = xp[:, :, i:i + 3, j:j + 3]
                ref[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, W) + b
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_maxpool(self):
        net = Network([MaxPool2("p")], (1, 2, 4))
        x = np.array([[[[1.0, 5.0, 2.0, 2.0], [3.0, 4.0, 0.0, 1.0]]]])
        out, _ = forward_pass(net, None, x)
        np.testing.assert_array_equal(out, [[[[5.0, 2.0]]]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            forward_pass(dense_net(3, 3), None, np.zeros((1, 4)))

    def test_incompatible_chain_rejected(self):
        with pytest.raises(DimensionError):
            Network([Dense("a", 3, 4), Dense("b", 5, 2)], (3,))

    def test_non_finite_names_layer(self):
        net = dense_net(2, 2)
        net.params.tensors["fc.bias"][0] = np.inf
        with pytest.raises(NumericError, match="fc"):
            forward_pass(net, None, np.ones((1, 2)))

    def test_missing_prefix(self):
        net = Network([Measurement("m", 4), PinvDecode("d", 4)], (4,))
        with pytest.raises(DimensionError):
            forward_pass(net, None, np.ones((1, 4)))

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        net = Network([Dense("a", 5, 4), ReLU("r"), Dense("b", 4, 2)], (5,)).init(rng)
        x = rng.standard_normal((3, 5)).astype(np.float32)
        a, _ = forward_pass(net, None, x)
        b, _ = forward_pass(net, None, x)
        assert a.tobytes() == b.tobytes()

    @settings(max_examples=30, deadline=None)
    @given(st.floats(-50, 50, allow_nan=False), st.integers(0, 1000))
    def test_linearity_without_bias(self, a, seed):
        rng = np.random.default_rng(seed)
        net = Network([Dense("fc", 6, 3)], (6,)).init(rng, np.float64)
        x = rng.standard_normal((1, 6))
        fx, _ = forward_pass(net, None, x)
        fax, _ = forward_pass(net, None, a * x)
        np.testing.assert_allclose(fax, a * fx, rtol=1e-6, atol=1e-12)


class TestBackward:
    def test_zero_gradient_at_optimum(self):
        net = dense_net(3, 2)
        x = np.array([[1.0, 2.0, 3.0]])
        target = x[:, :2]
        out, tape = forward_pass(net, None, x)
        _, g = euclidean_loss(out, target)
        grads = backward_pass(net, tape, g)
        for v in grads.values():
            assert np.abs(v).max() <= 1e-12

    def test_hand_computed_dense_gradient(self):
        W = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
        x = np.array([1.0, -1.0, 2.0])
        t = np.array([0.0, 1.0])
        net = Network([Dense("fc", 3, 2)], (3,))
        net.params = Parameters({"fc.weight": W.copy(), "fc.bias": np.zeros(2)})
        out, tape = forward_pass(net, None, x[None])
        _, g = euclidean_loss(out, t[None])
        grads = backward_pass(net, tape, g)
        # mean over the 2 outputs: d/dW of ||Wx - t||^2 / 2
        by_hand = 2 * np.outer(W @ x - t, x) / 2
        np.testing.assert_allclose(grads["fc.weight"], by_hand, atol=1e-14)
        np.testing.assert_allclose(grads["fc.weight"], [[-3.0, 3.0, -6.0], [5.5, -5.5, 11.0]])

    def test_stale_tape(self):
        net = dense_net(2, 2)
        out, tape = forward_pass(net, None, np.ones((1, 2)))
        adam_step(net.params, {k: np.ones_like(v) for k, v in net.params.tensors.items()}, AdamState())
        with pytest.raises(StaleTapeError):
            backward_pass(net, tape, np.ones_like(out))

    def test_tape_used_once(self):
        net = dense_net(2, 2)
        out, tape = forward_pass(net, None, np.ones((1, 2)))
        backward_pass(net, tape, np.ones_like(out))
        with pytest.raises(StaleTapeError):
            backward_pass(net, tape, np.ones_like(out))

    def test_frozen_omitted(self):
        net = dense_net(2, 2)
        net.params.freeze(["fc.weight"])
        out, tape = forward_pass(net, None, np.ones((1, 2)))
        grads = backward_pass(net, tape, np.ones_like(out))
        assert "fc.weight" not in grads and "fc.bias" in grads

    def test_phi_gradient_sums_both_paths(self):
        rng = np.random.default_rng(4)
        net = Network([Measurement("m", 6), PinvDecode("d", 6)], (6,))
        phi = rng.standard_normal((2, 6))
        x = rng.standard_normal((3, 6))
        assert grad_check(net, phi, x, rng.standard_normal((3, 6))) < 1e-6


class TestGradCheck:
    def test_linear_model(self):
        rng = np.random.default_rng(5)
        net = Network([Dense("fc", 4, 3)], (4,)).init(rng, np.float64)
        err = grad_check(net, None, rng.standard_normal((2, 4)), rng.standard_normal((2, 3)))
        assert err < 1e-7

    def test_tied_decoder_model(self):
        rng = np.random.default_rng(6)
        net = Network([Measurement("m", 9), PinvDecode("d", 9), Dense("fc", 9, 9)], (9,)).init(rng, np.float64)
        phi = rng.standard_normal((3, 9)) / 3
        err = grad_check(net, phi, rng.standard_normal((4, 9)), rng.standard_normal((4, 9)))
        assert err < 1e-4

    def test_relu_away_from_kinks(self):
        rng = np.random.default_rng(7)
        net = Network([Dense("a", 4, 6), ReLU("r"), Dense("b", 6, 2)], (4,)).init(rng, np.float64)
        x = rng.standard_normal((3, 4))
        pre = x @ net.params["a.weight"].T + net.params["a.bias"]
        assert np.abs(pre).min() > 1e-3
        assert grad_check(net, None, x, rng.standard_normal((3, 2))) < 1e-5

    def test_conv_pool_chain(self):
        rng = np.random.default_rng(8)
        layers = [Conv2d("c", 1, 2, 3), ReLU("r"), MaxPool2("p"), Reshape("f", (8,)), Dense("fc", 8, 3)]
        net = Network(layers, (1, 4, 4)).init(rng, np.float64)
        x = rng.standard_normal((2, 1, 4, 4))
        assert grad_check(net, None, x, np.array([0, 2]), loss="cross-entropy") < 1e-5


class TestLosses:
    def test_euclidean_zero(self):
        p = np.arange(6.0).reshape(2, 3)
        assert euclidean_loss(p, p)[0] == 0.0

    def test_euclidean_mean_reduction(self):
        assert euclidean_loss(np.ones(4) + 1, np.ones(4))[0] == 1.0

    def test_euclidean_random(self):
        rng = np.random.default_rng(9)
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        direct = sum((ai - bi) ** 2 for ai, bi in zip(a, b)) / 5
        assert euclidean_loss(a, b)[0] == pytest.approx(direct, rel=1e-14)

    def test_euclidean_shape_mismatch(self):
        with pytest.raises(DimensionError):
            euclidean_loss(np.ones((2, 3)), np.ones((3, 3)))

    def test_cross_entropy_uniform(self):
        assert cross_entropy_loss(np.zeros(7), 3)[0] == pytest.approx(math.log(7), abs=1e-12)

    def test_cross_entropy_saturated(self):
        assert cross_entropy_loss(np.array([20.0, -20.0]), 0)[0] == pytest.approx(0.0, abs=1e-8)

    def test_cross_entropy_formula(self):
        loss, grad = cross_entropy_loss(np.array([1.0, 2.0, 3.0]), 2)
        expected = math.log(math.e + math.e**2 + math.e**3) - 3
        assert loss == pytest.approx(expected, abs=1e-12)
        sm = np.exp([1.0, 2.0, 3.0]) / np.exp([1.0, 2.0, 3.0]).sum()
        np.testing.assert_allclose(grad, sm - np.array([0, 0, 1.0]), atol=1e-12)

    def test_cross_entropy_label_range(self):
        with pytest.raises(RangeError):
            cross_entropy_loss(np.zeros(3), 3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=2, max_size=12))
    def test_softmax_normalized(self, logits):
        s = softmax(np.array(logits))
        assert abs(s.sum() - 1.0) < 1e-6
        assert np.all((s >= 0) & (s <= 1))


class TestAdam:
    def test_zero_gradients_leave_params(self):
        p = Parameters({"w": np.array([1.0, -2.0])})
        adam_step(p, {"w": np.zeros(2)}, AdamState(lr=1e-3))
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_magnitude_is_lr(self):
        p = Parameters({"w": np.array([0.5])})
        state = AdamState(lr=1e-4)
        adam_step(p, {"w": np.array([1.0])}, state)
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert 0.5 - p["w"][0] == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-12)
        assert state.t == 1

    def test_frozen_bitwise_unchanged(self):
        w = np.random.default_rng(10).standard_normal(5).astype(np.float32)
        p = Parameters({"w": w.copy(), "b": np.zeros(2, np.float32)}, frozen={"w"})
        state = AdamState(lr=0.1)
        for _ in range(20):
            adam_step(p, {"w": np.ones(5, np.float32), "b": np.ones(2, np.float32)}, state)
        assert p["w"].tobytes() == w.tobytes()
        assert np.all(p["b"] < 0)

    def test_missing_gradient(self):
        p = Parameters({"w": np.zeros(2), "b": np.zeros(1)})
        with pytest.raises(KeyError):
            adam_step(p, {"w": np.zeros(2)}, AdamState())

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(11)
            p = Parameters({"w": rng.standard_normal(4).astype(np.float32)})
            s = AdamState(lr=1e-2)
            for _ in range(10):
                adam_step(p, {"w": rng.standard_normal(4).astype(np.float32)}, s)
            return p["w"].tobytes()
        assert run() == run()
