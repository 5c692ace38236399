import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from groupoid_heat.fitting import EstimateRegistry, fit_exponential, fit_power

values = arrays(float, st.integers(3, 30), elements=st.floats(1e-6, 1e6))


@given(values, st.floats(-3, 3))
def test_exponential_fit_has_no_violations(v, slope):
    arg = np.arange(v.size, dtype=float)
    fit = fit_exponential("f", arg, v * np.exp(slope * arg))
    assert fit.violations == 0
    assert np.all(v * np.exp(slope * arg) <= fit.bound(arg))


@given(values)
def test_power_fit_has_no_violations(v):
    arg = np.linspace(0.1, 5.0, v.size)
    fit = fit_power("p", arg, v, scale=arg)
    assert fit.violations == 0


def test_exact_exponential_recovered():
    k = np.arange(1, 8.0)
    fit = fit_exponential("e", k, 3.0 * np.exp(0.7 * k))
    assert fit.M == pytest.approx(0.7, rel=1e-10)
    assert fit.C == pytest.approx(3.0, rel=1e-9)


def test_fixed_rate_and_floor():
    k = np.arange(5.0)
    v = np.array([0.0, 1.0, 2.0, 4.0, 8.0])
    fit = fit_exponential("e", k, v, fixed_M=np.log(2), floor=0.0)
    assert fit.M == pytest.approx(np.log(2))
    assert fit.violations == 0


def test_all_zero_samples():
    fit = fit_exponential("z", np.arange(4.0), np.zeros(4))
    assert fit.C == 0.0 and fit.violations == 0


def test_shape_and_finiteness_checked():
    with pytest.raises(ValueError):
        fit_exponential("bad", np.arange(3.0), np.ones(4))
    with pytest.raises(ValueError):
        fit_exponential("bad", np.arange(3.0), np.array([1.0, np.inf, 2.0]))


def test_registry_is_append_only():
    reg = EstimateRegistry()
    reg.publish(fit_exponential("a", np.arange(3.0), np.ones(3)))
    with pytest.raises(KeyError):
        reg.publish(fit_exponential("a", np.arange(3.0), np.ones(3)))
    assert "a" in reg and reg.names() == ["a"]
    assert reg.total_violations() == 0
    assert '"a"' in reg.to_json()
