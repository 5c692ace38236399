import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from groupoid_heat import build_model, classify_degeneracy
from groupoid_heat.atlas import certify_domain, default_charts
from groupoid_heat.heat import FiberGeometry, bump, parametrix, space_time_grid, volterra_sum
from groupoid_heat.models import DegeneracyReport
from groupoid_heat.regularity import (
    RegularityReport,
    ReducedKernelView,
    chain_constants,
    chi,
    cut_chains,
    decomposed_chains,
    growth_spread,
    off_diagonal_growth,
    on_diagonal_growth,
    orbit_parameter,
    pair_arrow,
    pushforward_identity_check,
    reduced_pairing,
    support_bound,
    support_bound_check,
    transverse_smoothness,
    unit_integral,
)

X0 = np.array([1.0])


@pytest.fixture(scope="module")
def geom():
    return FiberGeometry(build_model("parabolic-circle"), X0)


@pytest.fixture(scope="module")
def kernel(geom):
    return volterra_sum(parametrix(geom, 2), 0.1)


@pytest.fixture(scope="module")
def degeneracy():
    return classify_degeneracy(build_model("parabolic-circle"))


def test_chi_profile():
    r = np.array([0.0, 0.3, 0.5, 0.75, 1.0, 2.0])
    v = chi(r)
    assert v[0] == v[1] == v[2] == 1.0 and v[4] == v[5] == 0.0
    assert 0 < v[3] < 1
    assert np.array_equal(chi(-r), v)


@given(st.floats(0.05, 3.0), st.floats(-3.0, -0.05), st.booleans())
@settings(max_examples=30)
def test_orbit_parameter_inverts_action(a, b, swap):
    m = build_model("parabolic-circle")
    x, z = (np.array([[b]]), np.array([[a]])) if swap else (np.array([[a]]), np.array([[b]]))
    arrow = pair_arrow(m, z, x)
    assert m.state_distance(arrow.target, z)[0] < 1e-10
    assert arrow.g[0, 0] == pytest.approx(orbit_parameter(m, x, z)[0])


def test_pushforward_identities(parabolic):
    out = pushforward_identity_check(parabolic)
    assert out["target"] < 1e-5 and out["source"] < 1e-5 and out["n"] > 50


def test_view_validation(parabolic, kernel):
    with pytest.raises(ValueError):
        ReducedKernelView(parabolic, kernel, coordinates="polar")
    with pytest.raises(ValueError):
        ReducedKernelView(parabolic, kernel, coordinates="chart")
    with pytest.raises(ValueError):
        ReducedKernelView(parabolic, kernel).derivative(np.array([[0.1]]), np.array([[0.2]]), order=3)


def test_chart_coordinates_are_arclength(parabolic, kernel):
    # the orthonormal generator flow moves at unit fiber speed, so in chart
    # coordinates the kernel does not depend on the base point
    ch = default_charts(parabolic)[0]
    certify_domain(ch, injectivity_points=40)
    view = ReducedKernelView(parabolic, kernel, chart=ch, coordinates="chart")
    x = np.array([[0.01], [-0.03], [0.1]])
    c = np.array([[0.3], [-0.4], [0.15]])
    assert np.allclose(view.values(x, c), kernel.radial(c[:, 0]), atol=1e-12)
    assert np.max(np.abs(view.derivative(x, c, 1, 1e-3, "x"))) < 1e-8


def test_flat_control_has_no_transverse_derivative():
    m = build_model("parabolic-circle", h_amp=0.0)
    K = volterra_sum(parametrix(FiberGeometry(m, X0), 2), 0.1)
    rep = transverse_smoothness(m, K, orders=(1,), mixed=False)
    assert max(rep.profiles[0]["value"]) < 1e-10


def test_transverse_smoothness(parabolic, kernel):
    rep = transverse_smoothness(parabolic, kernel)
    assert rep.passed, rep.verdicts
    assert {p["kind"] + str(p["order"]) for p in rep.profiles} == {"x1", "x2", "xt1"}
    lines = rep.to_csv().splitlines()
    assert lines[0] == "rho,order,kind,value,refinement_delta,verdict"
    assert len(lines) == 1 + 3 * 10
    assert rep.to_json() == RegularityReport(**{k: getattr(rep, k) for k in ("profiles", "fits", "verdicts", "meta")}).to_json()


def test_transverse_requires_converged(parabolic, kernel):
    import dataclasses

    bad = dataclasses.replace(kernel, converged=False)
    with pytest.raises(ValueError):
        transverse_smoothness(parabolic, bad)


# pairing -----------------------------------------------------------------------


def test_pairing_is_linear(parabolic, kernel):
    f1, f2 = bump(0.0, 2.0), bump(0.5, 1.5)
    p1 = reduced_pairing(parabolic, kernel, f1, n_theta=64)
    p2 = reduced_pairing(parabolic, kernel, f2, n_theta=64)
    both = reduced_pairing(parabolic, kernel, lambda a: 2.0 * f1(a) - 3.0 * f2(a), n_theta=64)
    assert both == pytest.approx(2 * p1 - 3 * p2, rel=1e-12, abs=1e-14)


def test_pairing_rejects_escaping_support(parabolic, kernel):
    with pytest.raises(ValueError):
        reduced_pairing(parabolic, kernel, lambda a: np.ones(len(a)), n_theta=16)


def test_pairing_tends_to_unit_integral(parabolic, geom):
    def f(a):
        return bump(0.0, 3.0)(a) * (1.5 + np.cos(a.target[..., 0]))

    target = unit_integral(parabolic, f, n_theta=64)
    errs = []
    for t in (0.1, 0.05, 0.02):
        K = volterra_sum(parametrix(geom, 2), t)
        errs.append(abs(reduced_pairing(parabolic, K, f, n_theta=64) - target))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 0.02 * abs(target)


# cut-off chains ------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_grid(geom):
    P = parametrix(geom, 2)
    grid = space_time_grid(P, 0.05, du=0.01, max_ds=5e-4)
    full = volterra_sum(P, 0.05, 3, grid=grid, keep_components=True)
    return grid, full


@pytest.mark.parametrize("k", [1, 2])
def test_cutoff_decomposition_is_exact(small_grid, parabolic, k):
    grid, full = small_grid
    x = np.array([0.04])
    parts = decomposed_chains(grid, parabolic, x, 0.2, 2.0, k)
    assert len(parts) == 2 ** (k + 1)
    total = sum(parts.values())
    assert np.max(np.abs(total - full.components[k])) < 1e-12 * np.max(np.abs(full.components[k])) + 1e-300
    cut = cut_chains(grid, parabolic, x, 0.2, 2.0, k)[k]
    assert np.max(np.abs(parts[(True,) * (k + 1)] - cut)) < 1e-15 + 1e-12 * np.max(np.abs(cut))


def test_chain_constants(parabolic, degeneracy):
    H = chain_constants(parabolic, degeneracy, 0.2)
    assert H == pytest.approx(math.exp(degeneracy.omega_global))
    assert support_bound(0.2, H, degeneracy.omega_global, 0) == pytest.approx(0.05 * math.exp(-degeneracy.omega_global))


def test_support_bound_check(parabolic, degeneracy):
    H = chain_constants(parabolic, degeneracy, 0.2)
    out = support_bound_check(parabolic, 0.2, H, degeneracy.omega_global, 2, n_surviving=300)
    assert out["surviving"] == 300
    assert out["violations"] == 0 and out["min_ratio"] >= 1.0


def test_support_bound_detects_too_weak_rate(parabolic, degeneracy):
    # at r = 2 the cutoff transitions sit where chains can cross them in two steps
    out = support_bound_check(parabolic, 2.0, 1.0, 1e-3, 2, n_surviving=1000)
    assert out["violations"] > 0
    H = chain_constants(parabolic, degeneracy, 2.0)
    assert support_bound_check(parabolic, 2.0, H, degeneracy.omega_global, 2, n_surviving=1000)["violations"] == 0


def test_on_diagonal_growth(parabolic, geom, degeneracy):
    H = chain_constants(parabolic, degeneracy, 0.2)
    fit = on_diagonal_growth(parabolic, parametrix(geom, 2), 0.05, k_max=3, H=H, n_levels=24)
    assert fit.violations == 0
    assert fit.M == pytest.approx(math.log(H), rel=0.1)
    assert fit.meta["k0_dx"] >= 0


def test_off_diagonal_refuses_neither(parabolic, geom):
    rep = DegeneracyReport("neither", np.nan, np.nan, 0.0, np.nan, 1.0)
    with pytest.raises(ValueError):
        off_diagonal_growth(parabolic, rep, parametrix(geom, 2), 0.05)


def test_off_diagonal_growth(parabolic, geom, degeneracy):
    H = chain_constants(parabolic, degeneracy, 0.2)
    fit = off_diagonal_growth(parabolic, degeneracy, parametrix(geom, 2), 0.05, k_max=2, H=H, n_levels=4)
    assert fit.violations == 0
    assert fit.meta["support_bound"] > 0


def test_growth_spread():
    class F:
        def __init__(self, M):
            self.M = M

    assert growth_spread([F(1.0), F(1.0)]) == 0.0
    assert growth_spread([F(0.9), F(1.1)]) == pytest.approx(0.2)
