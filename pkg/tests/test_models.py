import numpy as np
import pytest
from hypothesis import given, strategies as st

from groupoid_heat import GroupoidPoint, MODEL_NAMES, build_model, classify_degeneracy
from groupoid_heat.models import anchor_bounds, defining_function, wrap_angle

angles = st.floats(-np.pi, np.pi, allow_nan=False)
groups = st.floats(-3.0, 3.0, allow_nan=False)


def _arrow(model, x, g):
    x = np.atleast_2d(x)
    g = np.atleast_2d(g)
    return GroupoidPoint(x, model.act(x, g), g)


def test_unknown_model_and_parameters():
    with pytest.raises(ValueError):
        build_model("torus")
    with pytest.raises(ValueError):
        build_model("parabolic-circle", bogus=1.0)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_metric_positive_and_hash_stable(name, rng):
    m = build_model(name)
    y = m.random_states(rng, 500)
    assert np.all(m.h(y) > 0)
    assert m.model_hash() == build_model(name).model_hash()
    assert m.model_hash() != build_model(name, h_amp=0.0).model_hash()


@given(angles, groups, groups)
def test_action_is_a_group_action(th, g1, g2):
    m = build_model("parabolic-circle")
    x = np.array([[th]])
    lhs = m.act(m.act(x, [[g1]]), [[g2]])
    rhs = m.act(x, [[g1 + g2]])
    assert m.state_distance(lhs, rhs)[0] < 1e-9


@given(angles, groups, groups, groups)
def test_multiplication_associative_with_units_and_inverses(th, g1, g2, g3):
    m = build_model("parabolic-circle")
    c = _arrow(m, [th], [g3])
    b = _arrow(m, c.target, [g2])
    a = _arrow(m, b.target, [g1])
    left = m.multiply(m.multiply(a, b), c)
    right = m.multiply(a, m.multiply(b, c))
    assert m.arrow_distance(left, right)[0] < 1e-12
    assert m.arrow_distance(m.multiply(a, m.unit(a.source)), a)[0] < 1e-12
    e = m.multiply(m.inverse(a), a)
    assert m.arrow_distance(e, m.unit(a.source))[0] < 1e-12


def test_multiply_rejects_non_composable(parabolic):
    a = _arrow(parabolic, [1.0], [0.5])
    b = _arrow(parabolic, [2.0], [0.5])
    with pytest.raises(ValueError):
        parabolic.multiply(a, b)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_anchor_matches_derivative_of_action(name, rng):
    m = build_model(name)
    y = m.random_states(rng, 50)
    h = 1e-6
    for i in range(m.q):
        e = np.zeros((len(y), m.q))
        e[:, i] = h
        fd = (m.act(y, e) - m.act(y, -e)) / (2 * h)
        if m.angle_index:
            for j in m.angle_index:
                fd[:, j] = wrap_angle(fd[:, j] * 2 * h) / (2 * h)
        assert np.max(np.abs(fd - m.anchor(y)[:, i, :])) < 1e-6


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_anchor_vanishes_on_singular_stratum(name):
    m = build_model(name)
    y = m.collar_states(np.array([0.0]), n_dirs=4)
    assert np.all(m.on_singular(y))
    # isotropy generators vanish there; directions along the stratum need not
    assert np.max(np.abs(m.anchor(y)[:, : m.q])) < 1e-14
    up, lo = anchor_bounds(m, y)
    assert np.max(up) < 1e-14 and np.max(lo) < 1e-14


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_defining_function_is_distance_near_stratum(name):
    m = build_model(name)
    rho = np.geomspace(1e-4, 0.2, 12)
    y = m.collar_states(rho, n_dirs=2)
    got = defining_function(m, y)
    assert np.allclose(got, m.distance_to_singular(y), rtol=1e-12, atol=0)
    assert np.allclose(np.sort(np.unique(np.round(got, 12))), rho, rtol=1e-9)


@pytest.mark.parametrize("name", MODEL_NAMES)
def test_defining_function_positive_off_stratum(name, rng):
    m = build_model(name)
    y = m.random_states(rng, 2000)
    off = m.distance_to_singular(y) > 1e-9
    assert np.all(m.defining_function(y[off]) > 0)


@pytest.mark.parametrize("name", ["parabolic-circle", "stereo-sphere"])
def test_quadratic_degeneracy_classified(name):
    rep = classify_degeneracy(build_model(name))
    assert rep.classification == "uniformly-degenerate"
    assert 1.95 <= rep.lam <= 2.05 and 1.95 <= rep.lam_prime <= 2.05
    assert rep.upper_violations == 0 and rep.lower_violations == 0
    assert rep.omega_global > 0


def test_parabolic_degeneracy_constants():
    # |1 - cos(theta)| = theta^2 / 2 + O(theta^4) and h = 1 near theta = 0
    rep = classify_degeneracy(build_model("parabolic-circle", h_amp=0.0))
    assert rep.omega == pytest.approx(0.5, rel=0.05)
    assert rep.omega_prime == pytest.approx(0.5, rel=0.05)


def test_product_inherits_quadratic_degeneracy():
    # the pair factor is tangent to the stratum; the isotropy directions still vanish to second order
    rep = classify_degeneracy(build_model("cylinder-product"))
    assert rep.classification == "uniformly-degenerate"
    assert 1.95 <= rep.lam_prime <= 2.05


def test_coarse_grid_rejected(parabolic):
    with pytest.raises(ValueError, match="coarse"):
        classify_degeneracy(parabolic, per_decade=5)


def test_report_serializes(parabolic):
    rep = classify_degeneracy(parabolic, n_global=200)
    d = rep.to_dict()
    assert d["classification"] == rep.classification
    assert rep.to_json() == classify_degeneracy(parabolic, n_global=200).to_json()
