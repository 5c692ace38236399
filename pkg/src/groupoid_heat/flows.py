"""Base flows, groupoid exponentials and their linearizations.

A *section* is a combination of the model's algebroid frame, either with
constant coefficients or with coefficients depending on the base point.
Its right-invariant flow started at the unit over ``x`` is the curve of
arrows ``(target y(s), source x, g(s))`` with

    dy/ds = sum_i c_i(y) nu_i(y),    dg/ds = c_Y(y),

where ``c`` are the coefficients in the generator frame and ``c_Y`` their
isotropy part.  Every routine here is batched: ``x`` has shape
``(B, state_dim)`` and each batch element may carry its own coefficients
and time.  Flows are integrated on the unit interval with the right hand
side scaled by the requested time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, linalg
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .models import DEFAULT_SEED, GroupoidPoint

RTOL = 1e-9
ATOL = 1e-10


class FlowError(RuntimeError):
    """Integration failed; ``partial`` holds the trajectory reached so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class Section:
    """Combination of frame sections, constant or point-dependent.

    Parameters
    ----------
    coeffs : array_like or callable
        Either coefficients of shape ``(n,)`` / ``(B, n)`` or a function
        ``y -> (B, n)``.
    frame : {"orthonormal", "generator"}
        Frame in which ``coeffs`` are expressed.
    grad : callable, optional
        ``y -> (B, n, state_dim)`` derivative of a callable ``coeffs``.
        Needed only for variational flows; central differences are used
        when omitted.
    """

    def __init__(self, coeffs, frame="orthonormal", grad=None):
        if frame not in ("orthonormal", "generator"):
            raise ValueError(f"unknown frame {frame!r}")
        self.frame = frame
        self._grad = grad
        if callable(coeffs):
            self._func = coeffs
            self.coeffs = None
        else:
            self._func = None
            self.coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))

    def __neg__(self):
        if self._func is None:
            return Section(-self.coeffs, self.frame)
        f, gr = self._func, self._grad
        return Section(lambda y: -f(y), self.frame, None if gr is None else (lambda y: -gr(y)))

    def scaled(self, factor):
        if self._func is None:
            return Section(self.coeffs * factor, self.frame)
        f = self._func
        return Section(lambda y: factor * f(y), self.frame)

    def _raw(self, y, need_grad):
        B = y.shape[0]
        if self._func is None:
            c = np.broadcast_to(self.coeffs, (B, self.coeffs.shape[-1]))
            dc = np.zeros(c.shape + (y.shape[1],)) if need_grad else None
            return c, dc
        c = np.asarray(self._func(y), dtype=float)
        if not need_grad:
            return c, None
        if self._grad is not None:
            return c, np.asarray(self._grad(y), dtype=float)
        h = 1e-6
        dc = np.empty(c.shape + (y.shape[1],))
        for k in range(y.shape[1]):
            e = np.zeros(y.shape[1])
            e[k] = h
            dc[..., k] = (self._func(y + e) - self._func(y - e)) / (2 * h)
        return c, dc

    def generator(self, model, y, need_grad=False):
        """Coefficients in the generator frame and, optionally, their gradient."""
        c, dc = self._raw(y, need_grad)
        if self.frame == "generator":
            return c, dc
        s = model.frame_scale(y)
        cg = c / s
        if not need_grad:
            return cg, None
        ds = model.frame_scale_grad(y)
        dcg = dc / s[..., None] - (c / s**2)[..., None] * ds
        return cg, dcg


def unit_section(model, index, frame="orthonormal"):
    """The ``index``-th frame section as a :class:`Section`."""
    c = np.zeros(model.n)
    c[index] = 1.0
    return Section(c, frame)


@dataclass
class FlowResult:
    """Endpoint and dense trajectory of a batch of right-invariant flows.

    ``trajectory(s)`` evaluates states and group components at the fraction
    ``s`` of the flow time (``s = 1`` is the endpoint).
    """

    source: np.ndarray
    endpoint: np.ndarray
    g: np.ndarray
    accuracy: float
    nfev: int
    _dense: Callable | None = field(default=None, repr=False)
    _split: tuple = field(default=(), repr=False)

    def trajectory(self, s):
        if self._dense is None:
            raise ValueError("flow was integrated without dense output")
        z = np.asarray(self._dense(s))
        B, sd, q = self._split
        z = z.T if z.ndim == 2 else z[None, :]
        y = z[:, : B * sd].reshape(-1, B, sd)
        g = z[:, B * sd : B * (sd + q)].reshape(-1, B, q)
        return np.swapaxes(y, 0, 1).squeeze(), np.swapaxes(g, 0, 1).squeeze()

    @property
    def arrow(self):
        return GroupoidPoint(self.source, self.endpoint, self.g)


@dataclass
class VariationalResult:
    """Linearization of a batch of flows.

    Attributes
    ----------
    base_jacobian : ndarray (B, state_dim, state_dim)
        Differential of the base flow in state coordinates.
    frame_matrix : ndarray (B, n, n)
        The induced map of algebroid fibers, from A at the source to A at
        the endpoint, in orthonormal frames.
    full : ndarray (B, m, m)
        Linearization of the joint (state, group component) system.
    """

    flow: FlowResult
    base_jacobian: np.ndarray
    frame_matrix: np.ndarray
    full: np.ndarray
    min_abs_det: float


def _as_batch(model, x, t):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    t = np.broadcast_to(np.asarray(t, dtype=float), (x.shape[0],)).copy()
    return x, t


def _rhs_factory(model, section, B, t, variational):
    sd, q, n = model.state_dim, model.q, model.n
    m = sd + q

    def rhs(_s, z):
        y = z[: B * sd].reshape(B, sd)
        c, dc = section.generator(model, y, need_grad=variational)
        nu = model.anchor(y)
        vy = np.einsum("bn,bns->bs", c, nu) * t[:, None]
        vg = c[:, :q] * t[:, None]
        if not variational:
            return np.concatenate([vy.ravel(), vg.ravel()])
        D = z[B * m :].reshape(B, m, m)
        dnu = model.anchor_jacobian(y)
        F = np.zeros((B, m, m))
        F[:, :sd, :sd] = np.einsum("bn,bnst->bst", c, dnu) + np.einsum("bns,bnt->bst", nu, dc)
        F[:, sd:, :sd] = dc[:, :q, :]
        F *= t[:, None, None]
        return np.concatenate([vy.ravel(), vg.ravel(), (F @ D).ravel()])

    return rhs


def _rk4(rhs, z0, n_steps):
    h = 1.0 / n_steps
    z = z0.copy()
    for k in range(n_steps):
        s = k * h
        k1 = rhs(s, z)
        k2 = rhs(s + h / 2, z + h / 2 * k1)
        k3 = rhs(s + h / 2, z + h / 2 * k2)
        k4 = rhs(s + h, z + h * k3)
        z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def integrate_flow(
    model,
    section,
    x,
    t=1.0,
    variational=False,
    dense=False,
    rtol=RTOL,
    atol=ATOL,
    method="DOP853",
    n_steps=200,
):
    """Integrate the right-invariant flow of ``section`` from the units over ``x``.

    ``method="rk4"`` uses ``n_steps`` fixed classical Runge-Kutta steps,
    which makes the result a smooth function of all inputs (useful under
    finite differences).  Any other value is handed to
    :func:`scipy.integrate.solve_ivp`.
    """
    x, t = _as_batch(model, x, t)
    B, sd, q = x.shape[0], model.state_dim, model.q
    m = sd + q
    z0 = [x.ravel(), np.zeros(B * q)]
    if variational:
        z0.append(np.broadcast_to(np.eye(m), (B, m, m)).ravel())
    z0 = np.concatenate(z0)
    rhs = _rhs_factory(model, section, B, t, variational)
    dense_fn = None
    if method == "rk4":
        z1 = _rk4(rhs, z0, n_steps)
        nfev = 4 * n_steps
        acc = float("nan")
    else:
        sol = integrate.solve_ivp(rhs, (0.0, 1.0), z0, method=method, rtol=rtol, atol=atol, dense_output=dense)
        if sol.status != 0:
            partial = sol.y[:, -1] if sol.y.size else z0
            raise FlowError(f"integration failed: {sol.message}", partial)
        z1 = sol.y[:, -1]
        nfev = sol.nfev
        n_acc = max(len(sol.t) - 1, 1)
        acc = float(n_acc * (atol + rtol * np.max(np.abs(z1[: B * (sd + q)]))))
        dense_fn = sol.sol
    y1 = model.project(z1[: B * sd].reshape(B, sd))
    g1 = z1[B * sd : B * m].reshape(B, q)
    res = FlowResult(x, y1, g1, acc, nfev, dense_fn, (B, sd, q))
    if not variational:
        return res
    D = z1[B * m :].reshape(B, m, m)
    return res, D


def base_flow(model, x0, X, t=1.0, **kw):
    """Flow of the vector field ``nu(X)`` for time ``t`` starting at ``x0``."""
    return integrate_flow(model, X, x0, t, **kw)


def groupoid_exp(model, X, x, t=1.0, **kw):
    """The arrow ``exp(tX)(x)`` in the model's realization."""
    return integrate_flow(model, X, x, t, **kw).arrow


def frame_matrix_from_linearization(model, x, y1, D):
    """Map A at ``x`` to A at ``y1`` in orthonormal frames.

    A generator vector ``v`` at the unit over ``x`` is the fiber tangent
    ``(nu(v), v_Y)``; it is carried by the linearized flow and read back as
    ``(dg, pair part of dy)`` at the endpoint.
    """
    sd, q, n = model.state_dim, model.q, model.n
    sx = model.frame_scale(x)
    sy = model.frame_scale(y1)
    nu = model.anchor(x)  # (B, n, sd)
    B = x.shape[0]
    d0 = np.zeros((B, sd + q, n))
    d0[:, :sd, :] = np.swapaxes(nu, 1, 2) / sx[:, None, :]
    d0[:, sd:, :q] = np.eye(q)[None] / sx[:, None, :q]
    d1 = D @ d0
    out = [d1[:, sd:, :]]
    if model.pair_index:
        out.append(d1[:, list(model.pair_index), :])
    gen = np.concatenate(out, axis=1)
    return sy[:, :, None] * gen


def variational_flow(model, X, x, t=1.0, **kw):
    """Linearize the flow of ``X`` along its trajectory from ``x``.

    Returns the base Jacobian in state coordinates and the induced matrix on
    algebroid fibers in orthonormal frames.
    """
    x, tt = _as_batch(model, x, t)
    res, D = integrate_flow(model, X, x, tt, variational=True, **kw)
    sd = model.state_dim
    J = D[:, :sd, :sd]
    E = frame_matrix_from_linearization(model, x, res.endpoint, D)
    det = np.abs(np.linalg.det(E))
    return VariationalResult(res, J, E, D, float(np.min(det)))


def pushforward_section(model, X, Y, **kw):
    """The section ``E_X Y``: at ``y`` it equals ``E_X`` applied to ``Y`` at
    the point ``E_{-X}(y)``.

    Evaluated through the backward linearization ``E_{-X}`` from ``y``,
    whose inverse is ``E_X`` at ``E_{-X}(y)``.
    """

    def coeffs(y):
        var = variational_flow(model, -X, y, 1.0, **kw)
        z = var.flow.endpoint
        cy, _ = Y._raw(z, False)
        if Y.frame == "generator":
            cy = cy * model.frame_scale(z)
        return np.linalg.solve(var.frame_matrix, cy[..., None])[..., 0]

    return Section(coeffs, "orthonormal")


def random_sections(model, rng, size, scale=1.0):
    return rng.uniform(-scale, scale, size=(size, model.n))


def check_exp_identities(model, samples=1000, seed=DEFAULT_SEED, scale=1.0, rtol=RTOL, atol=ATOL):
    """Evaluate both sides of the two exponential identities on random data.

    Identity (conjugation): ``exp X exp Y = exp(E_X Y) exp X``, as products
    of bisections evaluated at ``x``.

    Identity (inverse): ``(exp X(x))^-1 = exp(-X)(E_X^nu(x))``.

    Returns a dict with the maximal deviations (arrow distance in the
    realization).
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    x = model.random_states(rng, samples)
    X = Section(random_sections(model, rng, samples, scale))
    Y = Section(random_sections(model, rng, samples, scale))
    kw = dict(rtol=rtol, atol=atol)

    eX = integrate_flow(model, X, x, **kw)
    # left side: exp X at t(exp Y(x)) composed with exp Y(x)
    eY = integrate_flow(model, Y, x, **kw)
    eXY = integrate_flow(model, X, eY.endpoint, **kw)
    lhs = model.multiply(eXY.arrow, eY.arrow)
    # right side: exp(E_X Y) at E_X(x) composed with exp X(x)
    Z = pushforward_section(model, X, Y, **kw)
    eZ = integrate_flow(model, Z, eX.endpoint, **kw)
    rhs = model.multiply(eZ.arrow, eX.arrow)
    dev_conj = model.arrow_distance(lhs, rhs)

    inv_lhs = model.inverse(eX.arrow)
    inv_rhs = integrate_flow(model, -X, eX.endpoint, **kw).arrow
    dev_inv = model.arrow_distance(inv_lhs, inv_rhs)
    return {
        "samples": int(samples),
        "conjugation_max_dev": float(np.max(dev_conj)),
        "inverse_max_dev": float(np.max(dev_inv)),
    }


# ----------------------------------------------------------------------
# fiber distance


def _check_same_fiber(model, a, b, tol=1e-9):
    if np.any(model.state_distance(a.source, b.source) > tol):
        raise ValueError("arrows lie on different source fibers")


def _fiber_metric_factor(model, x, g):
    return model.h(model.act(x, g))


def fiber_distance(model, a, b, grid=41, segments=64):
    """Distance between arrows in their common source fiber.

    For one-dimensional isotropy this is the exact length integral of
    ``sqrt(h)`` along the orbit.  For planar isotropy a shortest path on an
    8-connected grid of the group parameter seeds a polyline that is then
    relaxed by minimizing its length.
    """
    if model.pair_index:
        raise NotImplementedError("fiber distance is implemented for action-groupoid models only")
    _check_same_fiber(model, a, b)
    x = np.atleast_2d(a.source)
    ga, gb = np.atleast_2d(a.g), np.atleast_2d(b.g)
    if model.q == 1:
        dg = (gb - ga)[:, 0]

        def f(s):
            g = ga + s * (gb - ga)
            return np.sqrt(_fiber_metric_factor(model, x, g)) * np.abs(dg)

        val, _ = integrate.quad_vec(f, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
        return np.asarray(val)
    return _planar_fiber_distance(model, x, ga, gb, grid, segments)


def _planar_fiber_distance(model, x, ga, gb, grid, segments, iters=200, tol=1e-12):
    P = x.shape[0]
    K = segments
    pts = np.empty((P, K + 1, 2))
    for i in range(P):
        pts[i] = _grid_path(model, x[i], ga[i], gb[i], grid, K)
    xs = np.repeat(x[:, None, :], K, axis=1)
    eps = 1e-6
    # minimize the discrete energy sum_k h(mid_k)|dp_k|^2 (constant-speed
    # geodesics), preconditioned by the flat second-difference operator
    band = np.zeros((3, K - 1))
    band[0, 1:] = -1.0
    band[1, :] = 2.0
    band[2, :-1] = -1.0
    for _ in range(iters):
        d = pts[:, 1:] - pts[:, :-1]
        mid = 0.5 * (pts[:, 1:] + pts[:, :-1])
        hm = _fiber_metric_factor(model, xs, mid)
        gh = np.stack(
            [
                (_fiber_metric_factor(model, xs, mid + e) - _fiber_metric_factor(model, xs, mid - e)) / (2 * eps)
                for e in (np.array([eps, 0.0]), np.array([0.0, eps]))
            ],
            -1,
        )
        sq = np.sum(d**2, -1)
        grad = 2 * hm[:, :-1, None] * d[:, :-1] - 2 * hm[:, 1:, None] * d[:, 1:]
        grad += 0.5 * (gh[:, :-1] * sq[:, :-1, None] + gh[:, 1:] * sq[:, 1:, None])
        hbar = np.mean(hm, axis=1)
        rhs = np.moveaxis(grad / (2 * hbar[:, None, None]), 1, 0).reshape(K - 1, -1)
        step = linalg.solve_banded((1, 1), band, rhs).reshape(K - 1, P, 2)
        step = np.moveaxis(step, 0, 1)
        pts[:, 1:K] -= step
        if np.max(np.abs(step)) < tol:
            break
    out = np.sum(_seg_lengths(model, x, pts[:, :1], pts[:, 1:K], pts[:, K:]), axis=-1)
    out[np.linalg.norm(gb - ga, axis=-1) == 0] = 0.0
    return out


def _seg_lengths(model, x, first, interior, last):
    pts = np.concatenate([first, interior, last], axis=1)
    seg = pts[:, 1:] - pts[:, :-1]
    ln = np.linalg.norm(seg, axis=-1)
    xs = np.repeat(x[:, None, :], seg.shape[1], axis=1)
    h0 = _fiber_metric_factor(model, xs, pts[:, :-1])
    h1 = _fiber_metric_factor(model, xs, pts[:, 1:])
    hm = _fiber_metric_factor(model, xs, 0.5 * (pts[:, 1:] + pts[:, :-1]))
    return (np.sqrt(h0) + 4 * np.sqrt(hm) + np.sqrt(h1)) / 6.0 * ln


def _grid_path(model, x, ga, gb, n, segments):
    """Shortest 8-connected grid path from ``ga`` to ``gb``, resampled."""
    span = np.linalg.norm(gb - ga)
    if span == 0:
        return np.repeat(ga[None], segments + 1, axis=0)
    pad = 0.5 * span + 1e-3
    lo = np.minimum(ga, gb) - pad
    hi = np.maximum(ga, gb) + pad
    u = np.linspace(lo[0], hi[0], n)
    v = np.linspace(lo[1], hi[1], n)
    G = np.stack(np.meshgrid(u, v, indexing="ij"), -1).reshape(-1, 2)
    sh = np.sqrt(_fiber_metric_factor(model, np.repeat(x[None], len(G), 0), G)).reshape(n, n)
    idx = np.arange(n * n).reshape(n, n)
    rows, cols, wts = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        i0 = slice(0, n - di)
        j0 = slice(max(0, -dj), n - max(0, dj))
        i1 = slice(di, n)
        j1 = slice(max(0, dj), n + min(0, dj))
        a = idx[i0, j0].ravel()
        b = idx[i1, j1].ravel()
        step = np.hypot(di * (u[1] - u[0]), dj * (v[1] - v[0]))
        w = 0.5 * (sh[i0, j0] + sh[i1, j1]).ravel() * step
        rows += [a, b]
        cols += [b, a]
        wts += [w, w]
    graph = coo_matrix((np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(n * n, n * n)).tocsr()
    ia = np.argmin(np.sum((G - ga) ** 2, axis=1))
    ib = np.argmin(np.sum((G - gb) ** 2, axis=1))
    _, pred = dijkstra(graph, indices=ia, return_predecessors=True)
    path = [ib]
    while path[-1] != ia:
        path.append(pred[path[-1]])
    pts = G[path[::-1]]
    pts[0], pts[-1] = ga, gb
    # resample by arclength
    d = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
    s = np.linspace(0, d[-1], segments + 1)
    res = np.stack([np.interp(s, d, pts[:, 0]), np.interp(s, d, pts[:, 1])], -1)
    res[0], res[-1] = ga, gb
    return res


def check_distance_estimate(model, omega, pairs=200, seed=DEFAULT_SEED, spread=2.0):
    """Brute-force check of ``omega d(a, b) >= |log(rho(t(b)) / rho(t(a)))|``
    on random same-fiber pairs.  Returns ``(violations, worst_ratio)``."""
    rng = np.random.default_rng(seed)
    x = model.random_states(rng, pairs)
    x = x[model.distance_to_singular(x) > 1e-6]
    P = x.shape[0]
    ga = rng.normal(scale=spread, size=(P, model.q))
    gb = rng.normal(scale=spread, size=(P, model.q))
    a = GroupoidPoint(x, model.act(x, ga), ga)
    b = GroupoidPoint(x, model.act(x, gb), gb)
    d = fiber_distance(model, a, b)
    lhs = np.abs(np.log(model.defining_function(b.target) / model.defining_function(a.target)))
    ratio = lhs / np.maximum(omega * d, 1e-300)
    return int(np.sum(lhs > omega * d)), float(np.max(ratio)), d
