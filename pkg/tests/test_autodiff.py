"""Backward-pass tests: tape mechanics and finite-difference agreement."""

import numpy as np
import pytest

from voxbag import ConfigError, Tape, Tensor, backward, grad_check
from voxbag.ops import (
    conv3d,
    global_avg_pool,
    instance_norm3d,
    linear,
    mse_loss,
    mul,
    relu,
    residual_add,
    softmax_cross_entropy,
    sum_all,
)


def rnd(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


class TestTapeMechanics:
    def test_sum_gradient_is_ones(self):
        x = Tensor(rnd((2, 3, 4), 0), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_scalar_weight_closed_form(self):
        # loss = (w*x - t)^2 => d/dw = 2x(wx - t)
        w = Tensor([[2.0]], requires_grad=True)
        x, t = 3.0, 1.5
        with Tape() as tape:
            pred = linear(Tensor([[x]]), w, Tensor([0.0]))
            loss = mse_loss(pred, Tensor([[t]]))
        backward(loss, tape)
        np.testing.assert_allclose(w.grad, [[2 * x * (2.0 * x - t)]])

    def test_fanout_accumulates(self):
        x = Tensor(rnd((2, 2), 1), requires_grad=True)
        with Tape() as tape:
            y = residual_add(x, x)
            loss = sum_all(y)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, 2 * np.ones_like(x.data))

    def test_non_scalar_root_rejected(self):
        x = Tensor(rnd((2, 2), 2), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(ConfigError):
            backward(y, tape)

    def test_double_backward_rejected(self):
        x = Tensor(rnd(3, 3), requires_grad=True)
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        with pytest.raises(ConfigError):
            backward(loss, tape)

    def test_no_tape_means_no_recording(self):
        x = Tensor(rnd(3, 4), requires_grad=True)
        loss = sum_all(x)
        assert not loss.requires_grad
        with pytest.raises(ConfigError):
            backward(loss)


class TestGradCheck:
    def test_identity(self):
        err = grad_check(lambda t: sum_all(t), Tensor(rnd((3, 3), 5)))
        assert err < 1e-10

    def test_relu_away_from_kink(self):
        x = rnd((4, 4), 6)
        x = np.where(np.abs(x) < 1e-3, 0.5, x)
        err = grad_check(lambda t: sum_all(relu(t)), Tensor(x))
        assert err < 1e-6

    def test_instance_norm(self):
        x = rnd((1, 2, 3, 3, 3), 7)
        g, b = Tensor(np.array([1.3, 0.7])), Tensor(np.array([0.1, -0.2]))
        err = grad_check(lambda t: sum_all(instance_norm3d(t, g, b)), Tensor(x))
        assert err < 1e-5

    def test_instance_norm_affine_params(self):
        x = Tensor(rnd((1, 2, 3, 3, 3), 8))
        b = Tensor(np.zeros(2))
        err = grad_check(lambda g: sum_all(instance_norm3d(x, g, b)), Tensor(rnd(2, 9)))
        assert err < 1e-6

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_conv_input_weight_bias(self, stride, padding):
        x0 = rnd((1, 2, 4, 4, 4), 10)
        w0 = rnd((2, 2, 3, 3, 3), 11)
        b0 = rnd(2, 12)

        def via_x(t):
            return sum_all(conv3d(t, Tensor(w0), Tensor(b0), stride=stride, padding=padding))

        def via_w(t):
            return sum_all(conv3d(Tensor(x0), t, Tensor(b0), stride=stride, padding=padding))

        def via_b(t):
            return sum_all(conv3d(Tensor(x0), Tensor(w0), t, stride=stride, padding=padding))

        assert grad_check(via_x, Tensor(x0)) < 1e-6
        assert grad_check(via_w, Tensor(w0)) < 1e-6
        assert grad_check(via_b, Tensor(b0)) < 1e-6

    def test_losses_and_pool(self):
        logits = rnd((3, 2), 13)
        labels = [0, 1, 1]
        assert grad_check(lambda t: softmax_cross_entropy(t, labels), Tensor(logits)) < 1e-6
        pred, tgt = rnd((4, 1), 14), rnd((4, 1), 15)
        assert grad_check(lambda t: mse_loss(t, Tensor(tgt)), Tensor(pred)) < 1e-6
        x = rnd((2, 2, 3, 3, 3), 16)
        w = Tensor(rnd((2, 2), 17))
        assert grad_check(lambda t: sum_all(mul(global_avg_pool(t), w)), Tensor(x)) < 1e-6

    def test_three_layer_composite_network(self):
        # conv -> norm -> relu -> conv -> pool -> linear -> mse, per-parameter
        x0 = rnd((1, 1, 5, 5, 5), 20)
        w1 = rnd((2, 1, 3, 3, 3), 21)
        g1, b1 = np.ones(2), np.zeros(2)
        w2 = rnd((3, 2, 1, 1, 1), 22)
        wl, bl = rnd((1, 3), 23), rnd(1, 24)
        tgt = Tensor([[0.7]])

        def net(x, w1, g1, b1, w2, wl, bl):
            h = conv3d(x, w1, stride=1, padding=1)
            h = relu(instance_norm3d(h, g1, b1))
            h = conv3d(h, w2)
            f = global_avg_pool(h)
            return mse_loss(linear(f, wl, bl), tgt)

        params = {"x": x0, "w1": w1, "g1": g1, "b1": b1, "w2": w2, "wl": wl, "bl": bl}
        for name in params:
            def f(t, _name=name):
                args = {k: Tensor(v) for k, v in params.items()}
                args[_name] = t
                return net(**args)

            err = grad_check(f, Tensor(params[name]))
            assert err < 1e-5, f"gradient mismatch for {name}: {err}"


class TestCrossEntropyGradientStructure:
    def test_gradient_sums_to_zero_per_sample(self):
        logits = Tensor(rnd((5, 2), 30), requires_grad=True)
        with Tape() as tape:
            loss = softmax_cross_entropy(logits, [0, 1, 0, 1, 1])
        backward(loss, tape)
        sums = logits.grad.sum(axis=1)
        np.testing.assert_allclose(sums, 0.0, atol=1e-7)


class TestPrecisionUniformity:
    def test_mixed_dtypes_rejected(self):
        a = Tensor(rnd((2, 2), 40).astype(np.float32))
        b = Tensor(rnd((2, 2), 41))  # float64
        with pytest.raises(ConfigError, match="precision"):
            residual_add(a, b)

    def test_single_precision_graph_stays_single(self):
        x = Tensor(rnd((1, 1, 3, 3, 3), 42).astype(np.float32), requires_grad=True)
        w = Tensor(rnd((2, 1, 3, 3, 3), 43).astype(np.float32))
        with Tape() as tape:
            loss = sum_all(conv3d(x, w, padding=1))
        backward(loss, tape)
        assert loss.dtype == np.float32
        assert x.grad.dtype == np.float32
