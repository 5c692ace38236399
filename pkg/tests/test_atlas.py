import numpy as np
import pytest

from groupoid_heat import GroupoidPoint, build_model
from groupoid_heat.atlas import (
    ChartError,
    build_chart,
    certify_domain,
    chain_compose,
    change_coordinates,
    default_charts,
    fit_chain_growth,
    multiplication_estimates,
    multiply_direct,
    multiply_exp,
    overlap_estimates,
    random_words,
    sample_domain,
    select_chart,
    vertical_pushforward_growth,
)
from groupoid_heat.fitting import EstimateRegistry
from groupoid_heat.models import CoordinatePatch


@pytest.fixture(scope="module")
def sphere_chart():
    ch = default_charts(build_model("stereo-sphere"))[0]
    cert = certify_domain(ch, injectivity_points=150)
    return ch, cert


@pytest.fixture(scope="module")
def cylinder_charts():
    charts = default_charts(build_model("cylinder-product"))
    certs = [certify_domain(ch, injectivity_points=150) for ch in charts]
    return charts, certs


def test_zero_coordinates_give_units(sphere_chart, rng):
    ch, _ = sphere_chart
    x = ch.model.random_states(rng, 5)
    a = ch.forward(x, np.zeros((5, 2)))
    assert np.max(ch.model.arrow_distance(a, ch.model.unit(x))) < 1e-12


def test_parabolic_chart_is_arclength_flow(parabolic):
    # on the singular point the chart arrow is (0, 0, tau) exactly
    ch = default_charts(parabolic)[0]
    tau = np.linspace(-1, 1, 5)[:, None]
    a = ch.forward(np.zeros((5, 1)), tau)
    assert np.allclose(a.g, tau, atol=1e-12)
    assert np.allclose(a.target, 0.0, atol=1e-14)


def test_certificate(sphere_chart):
    _, cert = sphere_chart
    assert cert.min_det_lower > 0 and cert.min_abs_det > 0
    assert cert.singular_w_dev < 1e-9
    assert cert.collisions == 0 and cert.pairs_checked > 0
    assert cert.r0 > 0 and cert.M >= 0
    assert cert.fit["violations"] == 0


def test_certificate_deterministic(parabolic):
    c1 = certify_domain(default_charts(parabolic)[0], injectivity_points=60)
    c2 = certify_domain(default_charts(parabolic)[0], injectivity_points=60)
    assert c1.to_dict() == c2.to_dict()


def test_w_identity_on_singular_set(cylinder_charts, rng):
    charts, _ = cylinder_charts
    m = charts[0].model
    x = m.collar_states(np.array([0.0]), n_dirs=4)
    for ch in charts:
        c = ch.join(rng.uniform(-0.4, 0.4, (len(x), 1)), rng.uniform(-1, 1, (len(x), 2)))
        assert np.max(np.abs(ch.w_matrix(x, c) - np.eye(3))) < 1e-9


def test_inverse_roundtrip(sphere_chart, rng):
    ch, _ = sphere_chart
    x, c = sample_domain(ch, rng, 30)
    back, ok = ch.inverse(ch.forward(x, c))
    assert np.all(ok)
    assert np.max(np.abs(back - c)) < 1e-9


def test_word_outside_complement_rejected(cylinder):
    with pytest.raises(ValueError):
        build_chart(cylinder, 1, (np.array([1.0, 0.0, 0.0]),))


def test_patch_away_from_collar_rejected(sphere):
    far = CoordinatePatch("far", lambda c: c, lambda y: y, lambda y: np.zeros(np.shape(y)[:-1], bool))
    with pytest.raises(ChartError):
        build_chart(sphere, 0, (), patch=far)


def test_multiplication_ode_matches_realization(sphere_chart, rng):
    ch, _ = sphere_chart
    x, c = sample_domain(ch, rng, 40, tau_max=1.0)
    reg = EstimateRegistry()
    for i in range(2):
        sec = np.eye(2)[i]
        sol = multiply_exp(ch, x, c, sec, t=0.5)
        inv, ok = ch.inverse(multiply_direct(ch, x, c, sec, t=0.5))
        assert np.all(ok)
        assert np.max(np.abs(inv - sol.coords[:, -1])) < 1e-7
        est = multiplication_estimates(ch, x, c, sol, i, registry=reg)
        assert est["a_priori_violations"] == 0 and est["integrated_violations"] == 0
    assert reg.total_violations() == 0


def test_multiplication_on_singular_set_is_translation(sphere_chart):
    ch, _ = sphere_chart
    x = ch.model.collar_states(np.array([0.0]), n_dirs=1)[:1]
    sol = multiply_exp(ch, x, np.array([[0.2, -0.1]]), np.array([1.0, 0.0]), t=0.5)
    assert np.allclose(sol.coords[0, -1], [0.7, -0.1], atol=1e-10)


def test_change_coordinates_identity_and_tau(cylinder_charts, rng):
    charts, _ = cylinder_charts
    a_ch, b_ch = charts
    m = a_ch.model
    x, c = sample_domain(a_ch, rng, 10, tau_max=0.5)
    arrow = a_ch.forward(x, c)
    assert np.array_equal(change_coordinates(a_ch, a_ch, arrow, coords=c), c)
    xs = m.collar_states(np.array([0.0]), n_dirs=4)[:4]
    cs = a_ch.join(np.zeros((4, 1)), rng.uniform(-0.5, 0.5, (4, 2)))
    cb = change_coordinates(a_ch, b_ch, a_ch.forward(xs, cs), coords=cs)
    assert np.max(np.abs(cb[:, :2] - cs[:, :2])) < 1e-9


def test_select_chart_prefers_lowest_id(cylinder_charts, rng):
    charts, _ = cylinder_charts
    x, c = sample_domain(charts[0], rng, 5, tau_max=0.3)
    ids, coords = select_chart(charts, charts[0].forward(x, c))
    assert ids == [0] * 5
    assert np.max(np.abs(coords - c)) < 1e-9


def test_overlap_estimates(cylinder_charts, rng):
    charts, _ = cylinder_charts
    f1, f2 = overlap_estimates(charts[0], charts[1], rng, size=20)
    assert f1.violations == 0 and f2.violations == 0


def test_vertical_pushforward_rate_is_uniform(sphere_chart, rng):
    ch, _ = sphere_chart
    x, c = sample_domain(ch, rng, 8, tau_max=0.5)
    fit, per = vertical_pushforward_growth(ch, x, c, 0, np.linspace(0.2, 1.5, 6))
    assert fit.violations == 0
    assert np.all(np.isfinite(per))


def test_chain_single_factor_is_the_chart(sphere_chart, rng):
    ch, _ = sphere_chart
    x = ch.model.collar_states(np.array([1e-3]), n_dirs=2)[:2]
    words = random_words([ch], rng, 1, 2)
    res = chain_compose([ch], words, x, with_V=False)
    direct = ch.forward(x, words[0][1])
    assert np.max(ch.model.arrow_distance(res.arrows[0], direct)) < 1e-12


def test_chain_growth_and_ode(cylinder_charts, rng):
    charts, _ = cylinder_charts
    m = charts[0].model
    x = np.resize(m.collar_states(np.array([1e-3]), rng=rng), (4, m.state_dim))
    words = random_words(charts, rng, 4, 4)
    res = chain_compose(charts, words, x, with_ode=True)
    assert np.max(res.ode_deviation) < 1e-7
    fit = fit_chain_growth(res.V_norm)
    assert fit.violations == 0
    assert np.all(np.isfinite(res.V_norm))
