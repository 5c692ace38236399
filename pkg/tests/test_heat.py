import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, linalg, special

from groupoid_heat import GroupoidPoint, build_model
from groupoid_heat import heat
from groupoid_heat.heat import (
    FiberGeometry,
    ParametrixKernel,
    arclength,
    bump,
    convolve,
    gaussian_kernel,
    gaussian_match,
    gregory_weights,
    heat_coefficients,
    heat_residual,
    initial_condition_error,
    parametrix,
    radial_laplacian_fd,
    volterra_sum,
)
from groupoid_heat.io import decode_grid, encode_grid, kernel_header, read_kernel, write_kernel

X0 = np.array([1.0])


@pytest.fixture(scope="module")
def geom():
    return FiberGeometry(build_model("parabolic-circle"), X0)


@pytest.fixture(scope="module")
def kernels(geom):
    P = parametrix(geom, 3)
    return {t: volterra_sum(P, t) for t in (0.05, 0.1, 0.2)}


@pytest.fixture(scope="module")
def flat_kernel():
    g = FiberGeometry(build_model("parabolic-circle", h_amp=0.0), X0)
    return volterra_sum(parametrix(g, 2), 0.1)


def reference_heat(model, x, times, L=7.0, n=7001, dt=2e-5):
    """Dense Crank-Nicolson solution of ``u_t = m^-1/2 (m^-1/2 u_g)_g`` on the
    fiber over ``x`` from a point mass at the unit, in the group parameter."""
    g = np.linspace(-L, L, n)
    dg = g[1] - g[0]
    sm = np.sqrt(model.h(model.act(np.broadcast_to(x, (n, 1)), g[:, None])))
    half = np.sqrt(model.h(model.act(np.broadcast_to(x, (n - 1, 1)), (0.5 * (g[1:] + g[:-1]))[:, None])))
    a = 1.0 / (half * dg * dg)
    # operator A u = (a_{i+1/2}(u_{i+1}-u_i) - a_{i-1/2}(u_i-u_{i-1})) / sm_i
    lower = np.zeros(n)
    upper = np.zeros(n)
    diag = np.zeros(n)
    upper[:-1] = a
    lower[1:] = a
    diag[:-1] -= a
    diag[1:] -= a
    lower, upper, diag = lower / sm, upper / sm, diag / sm

    def apply(u):
        out = diag * u
        out[:-1] += upper[:-1] * u[1:]
        out[1:] += lower[1:] * u[:-1]
        return out

    def banded(theta):
        ab = np.zeros((3, n))
        ab[0, 1:] = -theta * dt * upper[:-1]
        ab[1] = 1 - theta * dt * diag
        ab[2, :-1] = -theta * dt * lower[1:]
        return ab

    u = np.zeros(n)
    u[n // 2] = 1.0 / (sm[n // 2] * dg)
    implicit, cn = banded(1.0), banded(0.5)
    out, t, step = {}, 0.0, 0
    for target in sorted(times):
        while t < target - 1e-12:
            if step < 8:
                # backward Euler damps the point mass before Crank-Nicolson takes over
                u = linalg.solve_banded((1, 1), implicit, u)
            else:
                u = linalg.solve_banded((1, 1), cn, u + 0.5 * dt * apply(u))
            t += dt
            step += 1
        out[target] = u.copy()
    return g, out


@pytest.fixture(scope="module")
def reference(geom):
    times = (0.01, 0.02, 0.03, 0.04, 0.05, 0.1)
    return reference_heat(geom.model, X0, times)


# geometry ------------------------------------------------------------------


def test_line_fibers_only(sphere, cylinder):
    for m in (sphere, cylinder):
        with pytest.raises(NotImplementedError):
            FiberGeometry(m, np.zeros(m.state_dim))


@given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
@settings(max_examples=25)
def test_arclength_matches_quadrature(th, g):
    m = build_model("parabolic-circle")
    x = np.array([th])
    want, _ = integrate.quad(lambda s: math.sqrt(m.h(m.act(x[None], [[s]]))[0]), 0.0, g, epsabs=1e-13)
    assert arclength(m, x, np.array(g)) == pytest.approx(want, abs=1e-11)


@given(st.floats(-3.0, 3.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
@settings(max_examples=25)
def test_arclength_is_additive(th, g1, g2):
    m = build_model("parabolic-circle")
    x = np.array([[th]])
    y = m.act(x, [[g1]])
    lhs = arclength(m, x, np.array([g1 + g2]))
    rhs = arclength(m, x, np.array([g1])) + arclength(m, y, np.array([g2]))
    assert lhs[0] == pytest.approx(rhs[0], abs=1e-11)


def test_inverse_arclength(geom):
    sig = np.linspace(-3, 3, 13)
    assert np.max(np.abs(geom.arclength(geom.inverse_arclength(sig)) - sig)) < 1e-12
    assert np.all(geom.density(np.linspace(-5, 5, 50)) > 0)


# parametrix ----------------------------------------------------------------


def test_coefficients_on_a_line(geom):
    u, Phi = heat_coefficients(geom, 3)
    assert np.array_equal(Phi[0], np.ones_like(u))
    assert np.max(np.abs(Phi[1:])) < 1e-12


def test_order_must_exceed_half_dimension(geom):
    with pytest.raises(ValueError):
        parametrix(geom, 0)
    with pytest.raises(ValueError):
        heat_coefficients(geom, 0)


def test_parametrix_support(geom):
    P = parametrix(geom, 2, cutoff=0.8)
    u = np.linspace(0.8, 3, 50)
    assert np.all(P.G(u, 0.1) == 0) and np.all(P.G(-u, 0.1) == 0)
    assert np.all(P.R(u, 0.1) == 0)


def test_remainder_vanishes_where_cutoff_is_one(geom):
    P = parametrix(geom, 2)
    u = np.linspace(-0.49, 0.49, 99)
    for t in (0.01, 0.05, 0.2):
        assert np.max(np.abs(P.R(u, t))) < 1e-6 * np.max(P.G(u, t))


def test_remainder_matches_finite_differences(geom):
    P = parametrix(geom, 2)
    h, dt = 1e-3, 1e-5
    u = np.arange(-1.2, 1.2 + h / 2, h)
    for t in (0.02, 0.1):
        gt = (P.G(u, t + dt) - P.G(u, t - dt)) / (2 * dt)
        fd = gt[2:-2] + radial_laplacian_fd(P.G(u, t), h)
        an = P.R(u[2:-2], t)
        assert np.max(np.abs(fd - an)) < 1e-4 * np.max(np.abs(an))


def test_remainder_decays_fast(geom):
    # supported where the cutoff varies, so |R| ~ exp(-c/t): faster than any power
    P = parametrix(geom, 2)
    ts = np.geomspace(1e-3, 1e-1, 9)
    u = np.linspace(0, 1, 2001)
    sup = np.array([np.max(np.abs(P.R(u, t))) for t in ts])
    slope = np.polyfit(np.log(ts), np.log(sup), 1)[0]
    assert slope >= 2 - 0.5 - 0.3


def test_gregory_weights_high_order():
    n = 201
    s = np.linspace(0, 1, n)
    w = gregory_weights(n) / (n - 1)
    # the right end carries full weight: integrands there are flat
    for k in range(6):
        f = s**k * (1 - s) ** 10
        assert abs(np.sum(w * f) - special.beta(k + 1, 11)) < 1e-12


# Volterra series -------------------------------------------------------------


def test_flat_kernel_is_gaussian(flat_kernel):
    assert gaussian_match(flat_kernel) < 1e-6


def test_volterra_series_converges(kernels):
    for t, K in kernels.items():
        assert K.converged
        tail = K.sup_norms[3:]
        assert all(b <= a for a, b in zip(tail, tail[1:]))
        assert K.sup_norms[-1] < 1e-8
        assert np.all(np.isfinite(K.factorial_diagnostic()))


def test_kernel_positive(kernels):
    for K in kernels.values():
        assert K.row().min() > -1e-9


def test_argument_validation(geom):
    P = parametrix(geom, 2)
    with pytest.raises(ValueError):
        volterra_sum(P, 0.1, k_max=0)
    with pytest.raises(ValueError):
        volterra_sum(P, -0.1)


def test_kernel_matches_reference_solver(kernels, reference, geom):
    g, sol = reference
    sel = np.abs(g) < 2.5
    for t in (0.05, 0.1):
        got = kernels[t].on_arrows(geom.model, GroupoidPoint(np.broadcast_to(X0, (sel.sum(), 1)), None, g[sel, None]))
        want = sol[t][sel]
        assert np.max(np.abs(got - want)) < 2e-3 * np.max(want)


def test_leading_coefficient_from_reference(reference, geom):
    # Q(t, r) sqrt(4 pi t) exp(r^2 / 4t) -> Phi_0(r) as t -> 0 at fixed r
    g, sol = reference
    sig = geom.arclength(g)
    ts = (0.01, 0.02, 0.03, 0.04)
    for r in (0.15, 0.3):
        for side in (1, -1):
            vals = []
            for t in ts:
                q = np.interp(side * r, sig, sol[t])
                vals.append(q * math.sqrt(4 * math.pi * t) * math.exp(r * r / (4 * t)))
            phi0 = np.polyfit(ts, vals, 1)[1]
            assert abs(phi0 - 1.0) < 0.02


def test_right_invariance(kernels, geom, rng):
    m = geom.model
    K = kernels[0.1]
    ga, gb = rng.uniform(-1.5, 1.5, (2, 20, 1))
    x = np.broadcast_to(X0, (20, 1))
    a = GroupoidPoint(np.array(x), m.act(x, ga), ga)
    b = GroupoidPoint(np.array(x), m.act(x, gb), gb)
    ab = m.multiply(a, m.inverse(b))
    lhs = K.on_arrows(m, ab)
    rhs = K.radial(arclength(m, x, ga[:, 0]) - arclength(m, x, gb[:, 0]))
    assert np.max(np.abs(lhs - rhs)) < 1e-7


def test_residual_refines(kernels, geom):
    r1 = heat_residual(geom.model, X0, kernels[0.2], 0.1)
    r2 = heat_residual(geom.model, X0, kernels[0.2], 0.05)
    assert r1 / r2 >= 3.0


def test_initial_condition(geom, kernels):
    g = np.linspace(-1.5, 1.5, 31)
    f = bump(0.2, 3.0)
    errs = [initial_condition_error(geom.model, X0, kernels[t], f, g) for t in (0.2, 0.1, 0.05)]
    assert errs[0] > errs[1] > errs[2]


# convolution -----------------------------------------------------------------


def test_zero_kernel_convolves_to_zero(parabolic):
    zero = lambda a: np.zeros(len(a))
    out = convolve(parabolic, X0, zero, gaussian_kernel(parabolic, 0.1), np.linspace(-1, 1, 5))
    assert np.all(out == 0)


@pytest.mark.parametrize("h_amp", [0.0, 0.3])
def test_gaussian_semigroup(h_amp):
    m = build_model("parabolic-circle", h_amp=h_amp)
    g = np.linspace(-2, 2, 21)
    conv = convolve(m, X0, gaussian_kernel(m, 0.1), gaussian_kernel(m, 0.15), g)
    exact = ParametrixKernel.gaussian(arclength(m, X0, g), 0.25)
    assert np.max(np.abs(conv - exact)) < 1e-8 * np.max(exact)


def test_convolution_tail_detected(parabolic):
    wide = lambda a: np.ones(len(a))
    with pytest.raises(RuntimeError):
        convolve(parabolic, X0, wide, wide, np.zeros(1), widen=0)


# serialization ---------------------------------------------------------------


def test_grid_roundtrip(flat_kernel, tmp_path):
    head = kernel_header(flat_kernel, "m" * 8, "c" * 8)
    vals, h2 = decode_grid(encode_grid(flat_kernel.row(), head))
    assert np.array_equal(vals, flat_kernel.row())
    assert h2["grid"]["n"] == flat_kernel.u.size and h2["model_hash"] == "m" * 8
    path, side = write_kernel(tmp_path / "k.bin", flat_kernel, "abc")
    vals, head = read_kernel(path)
    assert np.array_equal(vals, flat_kernel.row()) and side.exists()
    with pytest.raises(ValueError):
        decode_grid(b"XXXX" + path.read_bytes()[4:])
