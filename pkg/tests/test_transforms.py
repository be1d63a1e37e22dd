import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtameta.transforms import KINDS, OutOfDomain, constrain, unconstrain


def test_log_transform():
    v, j = constrain("log", 0.0)
    assert v == 1.0 and j == 0.0
    v, j = constrain("log", 2.0)
    assert v == pytest.approx(np.exp(2.0)) and j == 2.0


def test_tanh_transform():
    v, j = constrain("tanh", 0.0)
    assert v == 0.0 and j == pytest.approx(0.0)
    assert constrain("tanh", 3.0)[0] == pytest.approx(np.tanh(3.0))


def test_logit_round_trip():
    u = unconstrain("logit", 0.43)
    v, _ = constrain("logit", u)
    assert v == pytest.approx(0.43, abs=1e-14)


def test_out_of_domain():
    with pytest.raises(OutOfDomain):
        unconstrain("log", -1.0)
    with pytest.raises(OutOfDomain):
        unconstrain("tanh", 1.0)
    with pytest.raises(OutOfDomain):
        unconstrain("logit", 0.0)


def test_unknown_kind():
    with pytest.raises(ValueError):
        constrain("sqrt", 1.0)


@given(st.floats(-8, 8), st.sampled_from(KINDS))
@settings(max_examples=120, deadline=None)
def test_round_trip_from_unconstrained(u, kind):
    v, _ = constrain(kind, u)
    back = unconstrain(kind, v)
    assert np.isfinite(back)
    assert back == pytest.approx(u, abs=1e-8, rel=1e-8)


@given(st.floats(-5, 5), st.sampled_from(KINDS))
@settings(max_examples=80, deadline=None)
def test_log_jacobian_matches_numeric_derivative(u, kind):
    h = 1e-6
    v_hi, _ = constrain(kind, u + h)
    v_lo, _ = constrain(kind, u - h)
    deriv = (v_hi - v_lo) / (2 * h)
    _, log_jac = constrain(kind, u)
    if kind == "identity":
        assert log_jac == 0.0
    else:
        assert log_jac == pytest.approx(np.log(abs(deriv)), abs=1e-4)


def test_vectorized():
    u = np.array([-1.0, 0.0, 2.0])
    v, j = constrain("logit", u)
    assert v.shape == u.shape and j.shape == u.shape
    assert np.allclose(unconstrain("logit", v), u)
