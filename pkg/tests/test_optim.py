"""RMSProp updates and the linear learning-rate schedule."""

import numpy as np
import pytest

from ppgn import tensor as T
from ppgn.errors import InvalidInputError, NumericFailure
from ppgn.optim import RmsProp, RmsPropState, poly_lr, rmsprop_step


class TestPolyLr:
    def test_starts_at_base(self):
        assert poly_lr(0, 5000, 1e-4) == 1e-4

    def test_ends_at_zero(self):
        assert poly_lr(5000, 5000, 1e-4) == 0.0

    def test_linear_midpoint(self):
        assert poly_lr(2500, 5000, 1e-4) == pytest.approx(5e-5)

    def test_clamps_past_the_end(self):
        assert poly_lr(6000, 5000, 1e-4) == 0.0

    def test_rejects_negative_step(self):
        with pytest.raises(InvalidInputError):
            poly_lr(-1, 100, 1e-4)


class TestRmsPropStep:
    def test_zero_gradient_is_noop(self):
        p = T.parameter(np.array([1.0, -2.0], dtype=np.float32))
        state = RmsPropState()
        rmsprop_step({"p": p}, {"p": np.zeros(2, dtype=np.float32)}, state, 0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_single_step_magnitude(self):
        # acc = 0.01, update = 0.1 * 1 / (0.1 + 1e-8) ~= 1.0
        p = T.parameter(np.array([0.0]))
        state = RmsPropState(decay=0.99, eps=1e-8)
        rmsprop_step({"p": p}, {"p": np.array([1.0], dtype=np.float32)}, state, 0.1)
        assert p.data[0] == pytest.approx(-1.0, abs=1e-6)

    def test_accumulator_update_rule(self):
        p = T.parameter(np.zeros(1))
        state = RmsPropState(decay=0.9, eps=1e-8)
        rmsprop_step({"p": p}, {"p": np.array([2.0])}, state, 0.0)
        assert state.acc["p"][0] == pytest.approx(0.1 * 4.0)
        rmsprop_step({"p": p}, {"p": np.array([2.0])}, state, 0.0)
        assert state.acc["p"][0] == pytest.approx(0.9 * 0.4 + 0.4)

    def test_shape_mismatch_rejected(self):
        p = T.parameter(np.zeros(3))
        with pytest.raises(InvalidInputError):
            rmsprop_step({"p": p}, {"p": np.zeros(4)}, RmsPropState(), 0.1)

    def test_nonfinite_parameters_trip_debug_check(self):
        p = T.parameter(np.array([1e38], dtype=np.float32))
        state = RmsPropState()
        with pytest.raises(NumericFailure), np.errstate(over="ignore"):
            # enormous lr drives the parameter to inf
            rmsprop_step({"p": p}, {"p": np.array([1.0], dtype=np.float32)},
                         state, 1e45)


class TestRmsPropGroups:
    def test_group_learning_rates_move_in_ratio(self):
        a = T.parameter(np.zeros(4))
        b = T.parameter(np.zeros(4))
        a.grad = np.ones(4, dtype=np.float32)
        b.grad = np.ones(4, dtype=np.float32)
        opt = RmsProp({"main": ({"a": a}, 1.0), "slow": ({"b": b}, 0.1)})
        opt.step(1e-4)
        ratio = a.data / b.data
        np.testing.assert_allclose(ratio, 10.0, rtol=1e-6)

    def test_zero_grad_clears(self):
        a = T.parameter(np.zeros(2))
        a.grad = np.ones(2, dtype=np.float32)
        opt = RmsProp({"main": ({"a": a}, 1.0)})
        opt.zero_grad()
        assert a.grad is None

    def test_skips_parameters_without_gradients(self):
        a = T.parameter(np.array([5.0]))
        opt = RmsProp({"main": ({"a": a}, 1.0)})
        opt.step(0.1)
        assert a.data[0] == 5.0
