import numpy as np
import pytest

from sfodkit.ema import ema_init, ema_update


def params(**kwargs):
    return {k: np.asarray(v, dtype=np.float64) for k, v in kwargs.items()}


class TestEmaInit:
    def test_copies_source_exactly(self):
        src = params(w=[[1.0, 2.0], [3.0, 4.0]], b=[0.5])
        state = ema_init(src)
        for name in src:
            np.testing.assert_array_equal(state.teacher_params[name], src[name])
        assert state.step_count == 0
        assert state.alpha == 0.998

    def test_mutating_source_does_not_leak(self):
        src = params(w=[1.0, 2.0])
        state = ema_init(src)
        src["w"][0] = 99.0
        assert state.teacher_params["w"][0] == 1.0

    def test_empty_parameter_set(self):
        state = ema_init({})
        assert state.teacher_params == {}
        assert state.step_count == 0

    def test_rejects_bad_alpha(self):
        with pytest.raises(ValueError):
            ema_init(params(w=[1.0]), alpha=1.5)

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError, match="w"):
            ema_init(params(w=[np.inf]))


class TestEmaUpdate:
    def test_alpha_one_freezes_teacher(self):
        state = ema_init(params(w=[1.0, -2.0]), alpha=1.0)
        before = state.teacher_params["w"].copy()
        for _ in range(10):
            ema_update(state, params(w=[5.0, 5.0]))
        np.testing.assert_array_equal(state.teacher_params["w"], before)
        assert state.step_count == 10

    def test_alpha_zero_copies_student(self):
        state = ema_init(params(w=[1.0]), alpha=0.0)
        ema_update(state, params(w=[7.0]))
        assert state.teacher_params["w"][0] == 7.0

    def test_geometric_decay_closed_form(self):
        # teacher 1.0, student 0.0: after n steps teacher = alpha^n
        state = ema_init(params(w=[1.0]), alpha=0.998)
        student = params(w=[0.0])
        for n in range(1, 200):
            ema_update(state, student)
            expected = 0.998 ** n
            assert state.teacher_params["w"][0] == pytest.approx(expected, rel=1e-12)

    def test_geometric_convergence_to_constant_student(self):
        rng = np.random.default_rng(0)
        t0 = rng.normal(size=5)
        s = rng.normal(size=5)
        state = ema_init(params(w=t0), alpha=0.9)
        for n in range(1, 100):
            ema_update(state, params(w=s))
            expected = s + 0.9 ** n * (t0 - s)
            np.testing.assert_allclose(state.teacher_params["w"], expected, rtol=1e-12, atol=1e-13)

    def test_affine_in_student(self):
        rng = np.random.default_rng(1)
        t0 = rng.normal(size=4)
        s1, s2 = rng.normal(size=4), rng.normal(size=4)
        a = ema_init(params(w=t0), alpha=0.8)
        b = ema_init(params(w=t0), alpha=0.8)
        mid = ema_init(params(w=t0), alpha=0.8)
        ema_update(a, params(w=s1))
        ema_update(b, params(w=s2))
        ema_update(mid, params(w=(s1 + s2) / 2))
        np.testing.assert_allclose(
            mid.teacher_params["w"],
            (a.teacher_params["w"] + b.teacher_params["w"]) / 2,
            atol=1e-15,
        )

    def test_name_mismatch_lists_offenders(self):
        state = ema_init(params(w=[1.0], b=[2.0]))
        with pytest.raises(ValueError, match="b.*extra|extra.*b|\\['b', 'extra'\\]"):
            ema_update(state, params(w=[1.0], extra=[3.0]))

    def test_shape_mismatch_lists_offenders(self):
        state = ema_init(params(w=[1.0, 2.0]))
        with pytest.raises(ValueError, match="w"):
            ema_update(state, params(w=[[1.0, 2.0]]))

    def test_finite_stays_finite(self):
        rng = np.random.default_rng(2)
        state = ema_init(params(w=rng.normal(size=10)), alpha=0.99)
        for _ in range(50):
            ema_update(state, params(w=rng.normal(size=10) * 1e6))
        assert np.all(np.isfinite(state.teacher_params["w"]))

    def test_returns_same_state_object(self):
        state = ema_init(params(w=[1.0]))
        assert ema_update(state, params(w=[0.0])) is state
