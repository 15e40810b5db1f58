import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdopt.nn import Layout, ParamVector
from mdopt.optim import OptState, Stepper, adam_step, outer_step, sgd_step

LAY = Layout.flat(4)


def vec(values):
    return ParamVector(np.asarray(values, dtype=np.float64), LAY)


class TestSgd:
    def test_step(self):
        out = sgd_step(vec([1, 2, 3, 4]), vec([1, 1, 1, 1]), 0.5)
        assert np.array_equal(out.values, [0.5, 1.5, 2.5, 3.5])

    def test_rejects_nonpositive_lr(self):
        with pytest.raises(ValueError):
            sgd_step(vec([0] * 4), vec([0] * 4), 0.0)


class TestAdam:
    def test_first_step_matches_reference(self):
        # Kingma & Ba with bias correction: after one step m_hat = g, v_hat = g^2
        lr, eps = 1e-3, 1e-8
        g = np.array([0.3, -2.0, 1e-9, 0.0])
        p0 = vec([1.0, 1.0, 1.0, 1.0])
        state = OptState.adam(p0, lr=lr, eps=eps)
        p1, s1 = adam_step(state, p0, vec(g))
        assert np.allclose(p1.values, p0.values - lr * g / (np.abs(g) + eps), rtol=0, atol=1e-16)
        assert s1.step_count == 1
        assert state.step_count == 0

    def test_two_steps_by_hand(self):
        b1, b2, lr, eps = 0.9, 0.999, 0.01, 1e-8
        g1, g2 = np.array([1.0, -1.0, 2.0, 0.5]), np.array([0.5, 0.5, -1.0, 0.5])
        p = vec([0.0] * 4)
        st_ = OptState.adam(p, lr=lr)
        p, st_ = adam_step(st_, p, vec(g1))
        p, st_ = adam_step(st_, p, vec(g2))
        m = (1 - b1) * (b1 * g1 + g2)
        v = (1 - b2) * (b2 * g1**2 + g2**2)
        first = -lr * g1 / (np.abs(g1) + eps)
        expected = first - lr * (m / (1 - b1**2)) / (np.sqrt(v / (1 - b2**2)) + eps)
        assert np.allclose(p.values, expected, rtol=1e-13, atol=1e-16)

    def test_zero_gradient_is_fixed_point(self):
        p = vec([1.0, -2.0, 3.0, 0.0])
        out, _ = adam_step(OptState.adam(p), p, vec([0.0] * 4))
        assert out.bitwise_equal(p)

    def test_needs_adam_state(self):
        p = vec([0.0] * 4)
        with pytest.raises(ValueError):
            adam_step(OptState(), p, p)

    def test_stepper_keeps_state(self):
        s = Stepper("adam", 0.1)
        p = vec([0.0] * 4)
        for _ in range(3):
            p = s.step(p, vec([1.0] * 4))
        assert s.state.step_count == 3
        assert s.clone().state is s.state


class TestOuterStep:
    def test_endpoint_at_one(self):
        o, e = vec([0.1, 0.2, 0.3, 0.4]), vec([1.0 / 3, 2.0, -7.0, 1e-300])
        assert outer_step(o, e, 1.0).bitwise_equal(e)

    def test_origin_at_zero(self):
        o, e = vec([0.1, 0.2, 0.3, 0.4]), vec([1.0, 2.0, 3.0, 4.0])
        assert outer_step(o, e, 0.0).bitwise_equal(o)

    def test_range_checked(self):
        o = vec([0.0] * 4)
        with pytest.raises(ValueError):
            outer_step(o, o, 1.5)
        with pytest.raises(ValueError):
            outer_step(o, o, -0.1)

    @settings(max_examples=50, deadline=None)
    @given(
        lr=st.floats(0.0, 1.0),
        a=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
        b=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    )
    def test_interpolates(self, lr, a, b):
        o, e = vec(a), vec(b)
        out = outer_step(o, e, lr).values
        assert np.allclose(out, np.asarray(a) + lr * (np.asarray(b) - np.asarray(a)), rtol=1e-12, atol=1e-9)
