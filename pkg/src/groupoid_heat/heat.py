"""Fiberwise heat kernel by the Levi parametrix and its Volterra series.

The computation is carried out for one-dimensional isotropy.  Every source
fiber is then a complete Riemannian line, and the arclength

    sigma_x(g) = int_0^g sqrt(h(act(x, s))) ds

is an isometry onto R.  Distances to the unit are ``|sigma_x(g)|``, the
fiber Laplacian is ``-d^2/dsigma^2`` and fiber convolution becomes line
convolution in ``sigma`` (arclength is additive along orbits).  Kernels
depending only on the distance to the unit are therefore described by one
radial profile ``F(u, t)``, computed once per ``t`` and shared by all base
points.

The Laplacian is the positive one, ``(d/dt + Delta) Q = 0`` is the heat
equation, and the heat coefficients start at index 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.integrate import cumulative_simpson
from scipy.interpolate import make_interp_spline

from .cutoff import smooth_step
from .models import GroupoidPoint

_GL_CACHE = {}


def gauss_legendre(n):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _check_line_fibers(model):
    if model.q != 1 or model.p != 0:
        raise NotImplementedError(
            f"heat kernels are implemented for one-dimensional fibers only (model {model.name!r})"
        )


@dataclass
class FiberGeometry:
    """Source fiber over ``x`` with its right-invariant metric.

    The fiber is parameterized by the group component ``g``; the metric is
    ``m(g) dg^2`` with ``m(g) = h(act(x, g))``.
    """

    model: object
    x: np.ndarray
    panel: float = 0.25
    nodes: int = 16

    def __post_init__(self):
        _check_line_fibers(self.model)
        self.x = np.atleast_1d(np.asarray(self.x, float))

    @property
    def dim(self):
        return 1

    def metric(self, g):
        g = np.asarray(g, float)
        xs = np.broadcast_to(self.x, g.shape + (self.model.state_dim,))
        return self.model.h(self.model.act(xs, g[..., None]))

    def density(self, g):
        return np.sqrt(self.metric(g))

    def arclength(self, g):
        return arclength(self.model, self.x, g, self.panel, self.nodes)

    def distance_to_unit(self, g):
        return np.abs(self.arclength(g))

    def inverse_arclength(self, sigma, tol=1e-13, max_iter=60):
        """Group parameter at signed arclength ``sigma`` (Newton)."""
        sigma = np.asarray(sigma, float)
        g = sigma / np.sqrt(self.model.h(self.x[None])[0])
        for _ in range(max_iter):
            f = self.arclength(g) - sigma
            g = g - f / self.density(g)
            if np.max(np.abs(f), initial=0.0) < tol:
                break
        return g

    @staticmethod
    def van_vleck(u):
        """Jacobian of the fiber exponential map at radius ``u``: 1 on a line."""
        return np.ones_like(np.asarray(u, float))


def arclength(model, x, g, panel=0.25, nodes=16):
    """Signed arclength ``sigma_x(g)`` for a batch of sources ``x`` (or one).

    Composite Gauss-Legendre on panels of length at most ``panel``.
    """
    x = np.asarray(x, float)
    g = np.asarray(g, float)
    shape = np.broadcast_shapes(x.shape[:-1], g.shape)
    xb = np.broadcast_to(x, shape + (x.shape[-1],)).reshape(-1, x.shape[-1])
    gb = np.broadcast_to(g, shape).ravel()
    if gb.size == 0:
        return np.zeros(shape)
    P = max(1, int(np.ceil(np.max(np.abs(gb)) / panel)))
    t, w = gauss_legendre(nodes)
    # nodes on [0, 1] split into P panels
    s = ((np.arange(P)[:, None] + 0.5 * (t[None, :] + 1)) / P).ravel()
    ws = (np.broadcast_to(0.5 * w, (P, nodes)) / P).ravel()
    out = np.empty(gb.size)
    chunk = max(1, 2**20 // s.size)
    for i in range(0, gb.size, chunk):
        gi = gb[i : i + chunk]
        pts = gi[:, None] * s[None, :]
        vals = np.sqrt(model.h(model.act(xb[i : i + chunk, None, :], pts[..., None])))
        out[i : i + chunk] = gi * (vals @ ws)
    return out.reshape(shape)


# ----------------------------------------------------------------------
def heat_coefficients(geom, N, u=None, du=0.005, u_max=2.0):
    """Heat coefficients ``Phi_0..Phi_N`` on a radial grid.

    ``Phi_0`` is the inverse square root of the Van Vleck Jacobian and

        Phi_i(u) = u^-i Phi_0(u) int_0^u s^(i-1) Phi_0(s)^-1 (-Delta Phi_(i-1))(s) ds

    with the radial Laplacian of the fiber.  Returns ``(u, Phi)`` with
    ``Phi`` of shape ``(N + 1, len(u))``.
    """
    if N < 1:
        raise ValueError("order N must be >= 1")
    if u is None:
        u = np.arange(0.0, u_max + du / 2, du)
    u = np.asarray(u, float)
    phi0 = geom.van_vleck(u) ** -0.5
    Phi = [phi0]
    for i in range(1, N + 1):
        lap = -_radial_second_derivative(Phi[-1], u)  # Delta = -d^2/du^2 on a line
        integrand = np.where(u > 0, u ** (i - 1), 1.0 if i == 1 else 0.0) * (-lap) / phi0
        integral = cumulative_simpson(integrand, x=u, initial=0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            val = phi0 * integral / u**i
        val[0] = phi0[0] * (-lap[0]) / phi0[0] / i
        Phi.append(val)
    return u, np.array(Phi)


def _radial_second_derivative(f, u):
    """Fourth-order second derivative of an even function sampled on ``u >= 0``."""
    h = u[1] - u[0]
    ext = np.concatenate([f[2:0:-1], f, 2 * f[-1] - f[-2:-4:-1]])
    d2 = (-ext[:-4] + 16 * ext[1:-3] - 30 * ext[2:-2] + 16 * ext[3:-1] - ext[4:]) / (12 * h * h)
    return d2


@dataclass
class ParametrixKernel:
    """Truncated parametrix ``G_N`` and its heat defect ``R_N``.

    Radial evaluators in the fiber distance ``u`` (arclength to the unit).
    """

    order: int
    cutoff: float
    u: np.ndarray
    Phi: np.ndarray
    dim: int = 1
    _splines: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._splines = [make_interp_spline(self.u, p, k=5) for p in self.Phi]

    def coefficients(self, u, deriv=0):
        u = np.abs(np.asarray(u, float))
        out = np.zeros((self.order + 1,) + u.shape)
        inside = u <= self.u[-1]
        for i, sp in enumerate(self._splines):
            out[i][inside] = sp(u[inside], nu=deriv)
        return out

    def cutoff_function(self, u, derivatives=0):
        return smooth_step(np.abs(u), self.cutoff, derivatives)

    @staticmethod
    def gaussian(u, t, dim=1):
        u = np.asarray(u, float)
        return (4 * np.pi * t) ** (-dim / 2) * np.exp(-(u**2) / (4 * t))

    def G(self, u, t):
        u = np.asarray(u, float)
        F = np.einsum("i...,i->...", self.coefficients(u), t ** np.arange(self.order + 1.0))
        return self.cutoff_function(u) * self.gaussian(u, t, self.dim) * F

    def R(self, u, t):
        """``(d/dt + Delta) G_N`` with the time derivative and the radial
        derivatives taken analytically."""
        u = np.asarray(u, float)
        au = np.abs(u)
        sg = np.sign(u)
        N = self.order
        P0 = self.coefficients(u)
        P1 = self.coefficients(u, 1) * sg
        P2 = self.coefficients(u, 2)
        tp = t ** np.arange(N + 1.0)
        E = self.gaussian(u, t, self.dim)
        Eu = -u / (2 * t) * E
        F = np.einsum("i...,i->...", P0, tp)
        Fu = np.einsum("i...,i->...", P1, tp)
        core = -tp[N] * P2[N] + u * P1[0] / t
        for i in range(1, N + 1):
            core = core + t ** (i - 1) * (i * P0[i] + u * P1[i] - P2[i - 1])
        phi, d1, d2 = self.cutoff_function(au, 2)
        d1 = d1 * sg
        return phi * E * core - d2 * E * F - 2 * d1 * (Eu * F + E * Fu)


def parametrix(geom, N, cutoff=1.0, du=0.005):
    """Build the order-``N`` parametrix with cutoff radius ``cutoff``."""
    if N <= geom.dim / 2:
        raise ValueError("parametrix order must exceed half the fiber dimension")
    u, Phi = heat_coefficients(geom, N, du=du, u_max=cutoff + 10 * du)
    return ParametrixKernel(N, cutoff, u, Phi, geom.dim)


def radial_laplacian_fd(f, h):
    """Fourth-order ``-f''`` at the interior points of a uniform grid."""
    return -(-f[:-4] + 16 * f[1:-3] - 30 * f[2:-2] + 16 * f[3:-1] - f[4:]) / (12 * h * h)


# ----------------------------------------------------------------------
GREGORY = (1 / 12, -1 / 24, 19 / 720, -3 / 160, 863 / 60480, -275 / 24192)


def gregory_weights(n):
    """Trapezoid weights on ``n`` points with Gregory end corrections at the
    left end only (the right end is handled by flat integrands)."""
    w = np.ones(n)
    w[0] = 0.5
    for k, ck in enumerate(GREGORY, start=1):
        for j in range(k + 1):
            if j < n:
                w[j] += ck * (-1) ** (k - j) * math.comb(k, j)
    return w


@dataclass
class FiberKernel:
    """Radial profile of a fiber kernel on a (time, distance) grid.

    ``values[i, j]`` is the kernel at time ``times[i]`` and signed
    arclength ``u[j]``; row ``-1`` is the requested time ``t``.
    """

    t: float
    u: np.ndarray
    times: np.ndarray
    values: np.ndarray
    sup_norms: list = field(default_factory=list)
    increments: list = field(default_factory=list)
    converged: bool = True
    cutoff: float = 1.0
    order: int = 1
    meta: dict = field(default_factory=dict)
    components: np.ndarray | None = None
    _spl: dict = field(default_factory=dict, repr=False)

    def row(self, index=-1):
        return self.values[index]

    def radial(self, u, index=-1):
        """Quintic-spline evaluation of a time row at distances ``u``."""
        index = index % len(self.times)
        if index not in self._spl:
            self._spl[index] = make_interp_spline(self.u, self.values[index], k=5)
        u = np.asarray(u, float)
        out = np.zeros_like(u)
        inside = np.abs(u) <= self.u[-1]
        out[inside] = self._spl[index](np.abs(u[inside]))
        return out

    def on_arrows(self, model, arrows, index=-1):
        """Kernel values at arrows of the model's realization."""
        s = arclength(model, arrows.source, arrows.g[..., 0])
        return self.radial(s, index)

    def factorial_diagnostic(self):
        """``sup|Q^(k)| * k! / t^k``: bounded when the series decays like the
        volume of the time simplex."""
        return [float(s * math.factorial(k) / self.t**k) for k, s in enumerate(self.sup_norms)]

    def to_dict(self):
        return {
            "t": self.t,
            "cutoff": self.cutoff,
            "order": self.order,
            "n_u": int(self.u.size),
            "du": float(self.u[1] - self.u[0]),
            "n_times": int(self.times.size),
            "sup_norms": [float(v) for v in self.sup_norms],
            "increments": [float(v) for v in self.increments],
            "converged": bool(self.converged),
            **self.meta,
        }


def box_half_width(t, cutoff):
    return max(2 * cutoff, math.sqrt(4 * t * math.log(1e12)), 6 * math.sqrt(t))


class _TimeConvolver:
    """Space-time convolution on the ``(nt+1) x nu`` grid by FFT."""

    def __init__(self, nt1, nu, ds, du):
        self.nt1, self.nu = nt1, nu
        self.J = nu // 2
        self.shape = (sfft.next_fast_len(2 * nt1 - 1, real=True), sfft.next_fast_len(2 * nu - 1, real=True))
        self.scale = ds * du

    def spectrum(self, A):
        return sfft.rfft2(A, self.shape)

    def apply(self, specA, B):
        F = sfft.irfft2(specA * sfft.rfft2(B, self.shape), self.shape)
        return F[: self.nt1, self.J : self.J + self.nu] * self.scale


@dataclass
class SpaceTimeGrid:
    """Parametrix and remainder sampled on a ``(time, distance)`` grid.

    ``G[i]`` and ``R[i]`` hold ``G_N`` and ``R_N`` at time ``times[i]``;
    row 0 of ``G`` is the point mass at the unit.
    """

    t: float
    u: np.ndarray
    times: np.ndarray
    G: np.ndarray
    R: np.ndarray
    conv: _TimeConvolver
    specG: np.ndarray
    specR: np.ndarray

    @property
    def du(self):
        return float(self.u[1] - self.u[0])

    def apply_G(self, B):
        """``int_0^t G_N(t - s) o B(s) ds`` for every time row."""
        return self.conv.apply(self.specG, B)

    def apply_R(self, B):
        return self.conv.apply(self.specR, B)


def space_time_grid(P, t, du=0.005, max_ds=1.25e-4):
    """Sample ``P`` on the grid used by :func:`volterra_sum`."""
    if t <= 0:
        raise ValueError("t must be positive")
    L = box_half_width(t, P.cutoff)
    J = int(math.ceil(L / du))
    u = np.arange(-J, J + 1) * du
    nt = max(16, int(math.ceil(t / max_ds)))
    s = np.arange(nt + 1) * (t / nt)
    G = np.zeros((nt + 1, u.size))
    R = np.zeros_like(G)
    for i in range(1, nt + 1):
        G[i] = P.G(u, s[i])
        R[i] = P.R(u, s[i])
    G[0, J] = 1.0 / du
    conv = _TimeConvolver(nt + 1, u.size, t / nt, du)
    specG = conv.spectrum(G * gregory_weights(nt + 1)[:, None])
    specR = conv.spectrum(R)
    return SpaceTimeGrid(t, u, s, G, R, conv, specG, specR)


def volterra_sum(P, t, k_max=8, du=0.005, max_ds=1.25e-4, keep_components=False, tol=1e-8, grid=None):
    """Heat kernel profile ``Q = sum_k (-1)^k Q^(k)`` from the parametrix ``P``.

    ``R^(k)`` are built by repeated space-time convolution with ``R_N`` and
    ``Q^(k) = G_N * R^(k)``.  Time integrals use the trapezoid rule with
    Gregory corrections at the singular end of ``G_N`` (where it tends to a
    point mass); the other end is flat.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if grid is None:
        grid = space_time_grid(P, t, du, max_ds)
    Q = grid.G.copy()
    Rk = grid.R
    sups = [float(np.max(np.abs(grid.G[-1])))]
    incs = []
    comps = [grid.G[-1].copy()] if keep_components else None
    for k in range(1, k_max + 1):
        if k > 1:
            Rk = grid.apply_R(Rk)
        Qk = grid.apply_G(Rk)
        Q += (-1) ** k * Qk
        sups.append(float(np.max(np.abs(Qk[-1]))))
        incs.append(sups[-1])
        if keep_components:
            comps.append(Qk[-1].copy())
    tail = sups[-3:]
    converged = bool(np.all(np.diff(tail) <= 0) and sups[-1] < tol)
    nt = grid.times.size - 1
    return FiberKernel(
        grid.t,
        grid.u,
        grid.times,
        Q,
        sups,
        incs,
        converged,
        P.cutoff,
        P.order,
        {"nt": nt, "box": float(grid.u[-1]), "k_max": k_max},
        np.array(comps) if keep_components else None,
    )


def gaussian_match(kernel, dim=1):
    """Largest relative deviation from the Euclidean heat kernel on the
    region where the cutoff equals 1."""
    core = np.abs(kernel.u) <= kernel.cutoff / 2
    g = ParametrixKernel.gaussian(kernel.u[core], kernel.t, dim)
    return float(np.max(np.abs(kernel.row()[core] - g) / g))


# ----------------------------------------------------------------------
def convolve(model, x, k1, k2, g, box=None, panel=0.1, nodes=16, tail_tol=1e-8, widen=3):
    """Fiber convolution ``(k1 o k2)(a) = int_{G_x} k1(a b^-1) k2(b) db``.

    Parameters
    ----------
    model : GroupoidModel
        One-dimensional isotropy only.
    x : array
        Source (one base point).
    k1, k2 : callable
        Kernels evaluated on :class:`GroupoidPoint` batches.
    g : array
        Group components of the target arrows ``a`` in ``G_x``.
    box : tuple, optional
        Integration range of the group component of ``b``; enlarged while
        the integrand at the box edges exceeds ``tail_tol`` relative to its
        maximum.
    """
    _check_line_fibers(model)
    x = np.atleast_1d(np.asarray(x, float))
    g = np.atleast_1d(np.asarray(g, float))
    lo, hi = box if box is not None else (float(np.min(g)) - 6.0, float(np.max(g)) + 6.0)
    for attempt in range(widen + 1):
        val, edge = _convolve_box(model, x, k1, k2, g, lo, hi, panel, nodes)
        if edge <= tail_tol:
            return val
        half = 0.5 * (hi - lo)
        lo, hi = lo - half, hi + half
    raise RuntimeError(f"convolution tail {edge:.2e} above tolerance after widening the box")


def _convolve_box(model, x, k1, k2, g, lo, hi, panel, nodes):
    P = max(1, int(math.ceil((hi - lo) / panel)))
    t, w = gauss_legendre(nodes)
    edges = np.linspace(lo, hi, P + 1)
    half = 0.5 * np.diff(edges)
    gp = (0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * t[None, :]
    wp = half[:, None] * w[None, :]
    gp, wp = gp.ravel(), wp.ravel()
    xs = np.broadcast_to(x, (gp.size, x.size))
    yb = model.act(xs, gp[:, None])
    b = GroupoidPoint(np.array(xs), yb, gp[:, None])
    kb = k2(b) * np.sqrt(model.h(yb)) * wp
    ya = model.act(np.broadcast_to(x, (g.size, x.size)), g[:, None])
    src = np.broadcast_to(yb[None], (g.size,) + yb.shape).reshape(-1, x.size)
    tgt = np.broadcast_to(ya[:, None], (g.size, gp.size, x.size)).reshape(-1, x.size)
    dg = (g[:, None] - gp[None, :]).reshape(-1, 1)
    vals = k1(GroupoidPoint(src, tgt, dg)).reshape(g.size, gp.size)
    integrand = vals * kb[None, :]
    scale = np.max(np.abs(integrand)) or 1.0
    dens = np.abs(integrand) / (wp[None, :])
    edge = float(max(np.max(dens[:, :nodes]), np.max(dens[:, -nodes:])) / (np.max(dens) or 1.0))
    return integrand.sum(axis=1), edge


def gaussian_kernel(model, t):
    """The Euclidean heat kernel in fiber distance, as a kernel on arrows."""

    def k(a):
        s = arclength(model, a.source, a.g[..., 0])
        return ParametrixKernel.gaussian(s, t)

    return k


def bump(center, width):
    """Smooth bump ``b -> smooth_step(|g - center|, width)`` on a fiber."""

    def f(a):
        return smooth_step(np.abs(a.g[..., 0] - center), width)

    return f


def initial_condition_error(model, x, kernel, f, g_eval):
    """``sup |(Q o f) - f|`` over the target arrows with group components
    ``g_eval`` in the fiber over ``x``."""
    kq = lambda a: kernel.on_arrows(model, a)
    conv = convolve(model, x, kq, f, g_eval)
    xs = np.broadcast_to(np.atleast_1d(x), (len(g_eval), model.state_dim))
    a = GroupoidPoint(np.array(xs), model.act(xs, np.asarray(g_eval)[:, None]), np.asarray(g_eval)[:, None])
    return float(np.max(np.abs(conv - f(a))))


def heat_residual(model, x, kernel, step, g_range=None, time_index=-3):
    """``sup |(d/dt + Delta) Q|`` on a uniform grid in the group parameter.

    The fiber Laplacian is ``-(1/sqrt m) d/dg ((1/sqrt m) d/dg)`` applied with
    fourth-order differences of step ``step``; the time derivative uses a
    fourth-order stencil on the kernel's time rows.
    """
    geom = FiberGeometry(model, x)
    if g_range is None:
        g_range = (-2.0, 2.0)
    n = int(round((g_range[1] - g_range[0]) / step))
    g = g_range[0] + step * np.arange(-3, n + 4)
    sig = geom.arclength(g)
    sm = np.sqrt(geom.metric(g))
    i = time_index % len(kernel.times)
    ds = kernel.times[1] - kernel.times[0]
    rows = [kernel.radial(sig, i + k) for k in (-2, -1, 0, 1, 2)]
    dt = (rows[0] - 8 * rows[1] + 8 * rows[3] - rows[4]) / (12 * ds)
    Q = rows[2]
    # first derivative, then divide by sqrt(m), then derivative again
    d1 = (Q[:-4] - 8 * Q[1:-3] + 8 * Q[3:-1] - Q[4:]) / (12 * step)
    f = d1 / sm[2:-2]
    d2 = (f[:-4] - 8 * f[1:-3] + 8 * f[3:-1] - f[4:]) / (12 * step)
    lap = -d2 / sm[4:-4]
    res = dt[4:-4] + lap
    return float(np.max(np.abs(res)))
