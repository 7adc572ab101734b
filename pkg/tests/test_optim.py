"""Optimizer tests: Adam arithmetic, accumulation, learning-rate schedule."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxbag import ConfigError, NumericsError, Tensor
from voxbag.optim import Accumulator, AdamHyper, AdamState, adam_step, lr_at


def scalar_param(value, decay=True, name="w"):
    return [(name, Tensor(np.array([value])), decay)]


class TestAdamStep:
    def test_zero_gradient_no_l2_leaves_params(self):
        params = scalar_param(1.0)
        new = adam_step(params, {"w": np.zeros(1)}, AdamState(),
                        AdamHyper(l2=0.0), lr=1e-3)
        np.testing.assert_array_equal(new["w"], [1.0])

    def test_first_step_closed_form(self):
        # t=1: m_hat = g, v_hat = g^2 -> w' = w - lr * g/(|g|+eps)
        params = scalar_param(1.0)
        new = adam_step(params, {"w": np.array([2.0])}, AdamState(),
                        AdamHyper(eta=1e-3, eps=1e-5, l2=0.0), lr=1e-3)
        expect = 1.0 - 1e-3 * (2.0 / (2.0 + 1e-5))
        np.testing.assert_allclose(new["w"], [expect], rtol=1e-12)
        assert abs(new["w"][0] - 0.9990005) < 1e-6

    def test_l2_alone_shrinks_weight(self):
        params = scalar_param(1.0)
        new = adam_step(params, {"w": np.zeros(1)}, AdamState(),
                        AdamHyper(eps=1e-5, l2=1e-4), lr=1e-3)
        expect = 1.0 - 1e-3 * (1e-4 / (1e-4 + 1e-5))
        np.testing.assert_allclose(new["w"], [expect], rtol=1e-10)

    def test_l2_skips_non_decay_params(self):
        params = scalar_param(1.0, decay=False)
        new = adam_step(params, {"w": np.zeros(1)}, AdamState(),
                        AdamHyper(l2=1e-4), lr=1e-3)
        np.testing.assert_array_equal(new["w"], [1.0])

    def test_decay_norm_params_flag(self):
        params = scalar_param(1.0, decay=False)
        new = adam_step(params, {"w": np.zeros(1)}, AdamState(),
                        AdamHyper(l2=1e-4, decay_norm_params=True), lr=1e-3)
        assert new["w"][0] < 1.0

    def test_first_step_magnitude_bounded_by_lr(self):
        for g in (0.01, 1.0, 100.0):
            new = adam_step(scalar_param(0.0), {"w": np.array([g])}, AdamState(),
                            AdamHyper(l2=0.0), lr=1e-3)
            assert abs(new["w"][0]) <= 1e-3 + 1e-12

    def test_huge_eps_freezes_update(self):
        new = adam_step(scalar_param(1.0), {"w": np.array([5.0])}, AdamState(),
                        AdamHyper(eps=1e12, l2=0.0), lr=1e-3)
        assert abs(new["w"][0] - 1.0) < 1e-11

    def test_nan_gradient_reports_parameter(self):
        with pytest.raises(NumericsError, match="w"):
            adam_step(scalar_param(1.0), {"w": np.array([np.nan])}, AdamState(),
                      AdamHyper(), lr=1e-3)

    def test_step_counter_increments_per_step(self):
        state = AdamState()
        params = scalar_param(1.0)
        adam_step(params, {"w": np.ones(1)}, state, AdamHyper(), lr=1e-3)
        adam_step(params, {"w": np.ones(1)}, state, AdamHyper(), lr=1e-3)
        assert state.t == 2


class TestAccumulator:
    def test_sixteen_identical_gradients_mean_is_g(self):
        acc = Accumulator()
        g = np.array([0.25, -1.0])
        for _ in range(16):
            acc.add({"w": g})
        assert acc.ready
        np.testing.assert_array_equal(acc.flush()["w"], g)

    def test_zero_gradients_zero_step(self):
        acc = Accumulator()
        for _ in range(16):
            acc.add({"w": np.zeros(3)})
        np.testing.assert_array_equal(acc.flush()["w"], np.zeros(3))

    def test_one_through_sixteen_mean(self):
        acc = Accumulator()
        for i in range(1, 17):
            acc.add({"w": np.array([float(i)])})
        np.testing.assert_allclose(acc.flush()["w"], [8.5])

    def test_early_flush_rejected_unless_partial(self):
        acc = Accumulator()
        acc.add({"w": np.ones(1)})
        with pytest.raises(ConfigError):
            acc.flush()
        np.testing.assert_array_equal(acc.flush(allow_partial=True)["w"], [1.0])

    def test_flush_resets(self):
        acc = Accumulator(target_count=2)
        acc.add({"w": np.ones(1)})
        acc.add({"w": np.ones(1)})
        acc.flush()
        assert acc.micro_count == 0 and acc.sums == {}

    def test_cycle_bit_identical_to_mean_gradient_step(self):
        rng = np.random.default_rng(0)
        grads = [rng.standard_normal(4).astype(np.float32) for _ in range(16)]
        params = [("w", Tensor(rng.standard_normal(4).astype(np.float32)), True)]

        acc = Accumulator()
        for g in grads:
            acc.add({"w": g})
        via_acc = adam_step(params, acc.flush(), AdamState(), AdamHyper(), lr=1e-3)

        mean = grads[0].copy()
        for g in grads[1:]:
            mean += g
        mean /= 16
        via_mean = adam_step(params, {"w": mean}, AdamState(), AdamHyper(), lr=1e-3)
        assert np.array_equal(via_acc["w"], via_mean["w"])


class TestLrSchedule:
    @pytest.mark.parametrize("epoch,expect", [
        (0, 1e-3), (99, 1e-3), (100, 1e-4), (199, 1e-4),
        (200, 1e-5), (300, 1e-6), (400, 1e-7), (499, 1e-7),
    ])
    def test_breakpoints(self, epoch, expect):
        np.testing.assert_allclose(lr_at(epoch, 1e-3), expect, rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 1000))
    def test_non_increasing_piecewise_constant(self, epoch):
        here = lr_at(epoch, 1e-3)
        nxt = lr_at(epoch + 1, 1e-3)
        assert nxt <= here
        if (epoch + 1) % 100 != 0:
            assert nxt == here
        else:
            assert nxt == pytest.approx(here / 10)
