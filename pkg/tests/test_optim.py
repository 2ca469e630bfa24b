import math

import numpy as np
import pytest

from gradmask.optim import NonFiniteGradientError, OptimizerState, Schedule, adamw_step, lr_at
from gradmask.tensor import Tensor


class TestSchedule:
    def test_endpoints(self):
        s = Schedule(1e-3, total=100, warmup=5)
        assert lr_at(0, s) == 0.0
        assert lr_at(5, s) == pytest.approx(1e-3)
        assert lr_at(100, s) == pytest.approx(0.0, abs=1e-18)

    def test_warmup_linear(self):
        s = Schedule(2.0, total=50, warmup=10)
        assert lr_at(3, s) == pytest.approx(0.6)

    def test_cosine_midpoint(self):
        s = Schedule(1.0, total=110, warmup=10)
        assert lr_at(60, s) == pytest.approx(0.5)

    def test_monotone_after_warmup(self):
        s = Schedule(1.0, total=200, warmup=10)
        vals = [lr_at(t, s) for t in range(10, 201)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_constant(self):
        s = Schedule(0.01, total=10, warmup=3, kind="constant")
        assert {lr_at(t, s) for t in range(12)} == {0.01}


class TestAdamW:
    def test_one_step_by_hand(self):
        w0 = np.array([0.5, -1.0, 2.0])
        g = np.array([0.1, -0.2, 0.0])
        p = {"w": Tensor(w0.copy(), requires_grad=True)}
        p["w"].grad = g.copy()
        st = OptimizerState(weight_decay=0.01)
        lr = adamw_step(p, st, Schedule(0.1, total=10, kind="constant"))
        m = 0.1 * g
        v = 0.001 * g * g
        mhat, vhat = m / 0.1, v / 0.001
        want = w0 * (1 - 0.1 * 0.01) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        assert lr == 0.1
        np.testing.assert_allclose(p["w"].data, want, rtol=0, atol=1e-12)

    def test_two_steps_by_hand(self):
        p = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        st = OptimizerState(weight_decay=0.0)
        sched = Schedule(0.05, total=10, kind="constant")
        w = 1.0
        m = v = 0.0
        for t, gv in enumerate([0.3, -0.7], start=1):
            p["w"].grad = np.array([gv])
            adamw_step(p, st, sched)
            m = 0.9 * m + 0.1 * gv
            v = 0.999 * v + 0.001 * gv * gv
            w -= 0.05 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert p["w"].data[0] == pytest.approx(w, abs=1e-12)

    def test_zero_grad_no_decay_unchanged(self):
        p = {"w": Tensor(np.array([3.0, -4.0]), requires_grad=True)}
        adamw_step(p, OptimizerState(weight_decay=0.0), Schedule(0.1, total=5, kind="constant"))
        assert p["w"].data.tolist() == [3.0, -4.0]

    def test_decay_only_shrinks(self):
        p = {"w": Tensor(np.array([3.0, -4.0]), requires_grad=True)}
        adamw_step(p, OptimizerState(weight_decay=0.5), Schedule(0.1, total=5, kind="constant"))
        np.testing.assert_allclose(p["w"].data, [3.0 * 0.95, -4.0 * 0.95], rtol=0, atol=1e-15)

    def test_nonfinite_names_parameter(self):
        p = {"layer0.Wq": Tensor(np.zeros(2), requires_grad=True)}
        p["layer0.Wq"].grad = np.array([np.inf, 0.0])
        with pytest.raises(NonFiniteGradientError, match="layer0.Wq"):
            adamw_step(p, OptimizerState(), Schedule(0.1, total=5))

    def test_scalar_parameter_stays_array(self):
        p = {"sp": Tensor(np.array(1.0), requires_grad=True)}
        p["sp"].grad = np.array(0.5)
        adamw_step(p, OptimizerState(), Schedule(0.1, total=5, kind="constant"))
        assert isinstance(p["sp"].data, np.ndarray) and p["sp"].data.shape == ()

    def test_clip(self):
        p = {"w": Tensor(np.zeros(2), requires_grad=True)}
        p["w"].grad = np.array([30.0, 40.0])
        st = OptimizerState(weight_decay=0.0)
        adamw_step(p, st, Schedule(0.1, total=5, kind="constant"), grad_clip=5.0)
        np.testing.assert_allclose(st.m["w"], 0.1 * np.array([3.0, 4.0]), rtol=1e-10)
