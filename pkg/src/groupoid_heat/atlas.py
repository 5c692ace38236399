"""Exponential coordinate charts on a boundary groupoid.

A chart sends a base point ``x`` and coordinates ``(mu, tau)`` to the arrow

    exp(tau_q Y_q) ... exp(tau_1 Y_1) exp(mu_p X_p) ... exp(mu_1 X_1) exp(Z_k) ... exp(Z_1) (x)

where the products are products of bisections (rightmost applied first),
``Y`` are the orthonormal isotropy sections, ``X`` the orthonormal
complement and ``Z_1..Z_k`` a fixed word in the span of the ``X``.

Coordinates are stored as one array ``c`` of shape ``(B, n)`` ordered
``(tau_1..tau_q, mu_1..mu_p)``.  The matrix ``w`` has as columns the
coordinate vector fields ``d/dc_k`` right-translated to the algebroid at the
target, in the orthonormal frame ``(Y_1..Y_q, X_1..X_p)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .fitting import EstimateRegistry, fit_exponential
from .flows import ATOL, RTOL, Section, integrate_flow, variational_flow
from .models import DEFAULT_SEED, GroupoidPoint, wrap_angle


class ChartError(RuntimeError):
    pass


@dataclass
class ExpChart:
    """One exponential coordinate patch.

    Parameters
    ----------
    model : GroupoidModel
    chart_id : int
    word : tuple of arrays
        Coefficients (orthonormal frame) of the sections ``Z_1..Z_k``; each
        must lie in the span of the complement sections.
    eps : float
        Half-width of the admissible ``mu`` range.
    r, M : float or None
        Parameters of the admissible set ``rho(x) < r exp(-M |tau|_1)``;
        filled in by :func:`certify_domain`.
    """

    model: object
    chart_id: int = 0
    word: tuple = ()
    eps: float = 0.5
    r: float | None = None
    M: float | None = None
    method: str = "DOP853"
    n_steps: int = 64
    rtol: float = 1e-11
    atol: float = 1e-12

    @property
    def n(self):
        return self.model.n

    def split(self, c):
        c = np.atleast_2d(np.asarray(c, float))
        q = self.model.q
        return c[:, q:], c[:, :q]

    def join(self, mu, tau):
        mu = np.atleast_2d(np.asarray(mu, float))
        tau = np.atleast_2d(np.asarray(tau, float))
        return np.concatenate([tau, mu], axis=1)

    def _factors(self, c):
        """Factors in application order: (coefficients, coordinate column or None)."""
        B = c.shape[0]
        n, q, p = self.n, self.model.q, self.model.p
        out = []
        for z in self.word:
            out.append((np.broadcast_to(np.asarray(z, float), (B, n)), None))
        for j in range(p):
            coef = np.zeros((B, n))
            coef[:, q + j] = c[:, q + j]
            out.append((coef, q + j))
        for i in range(q):
            coef = np.zeros((B, n))
            coef[:, i] = c[:, i]
            out.append((coef, i))
        return out

    def _flow_kw(self, method=None):
        m = method or self.method
        if m == "rk4":
            return dict(method="rk4", n_steps=self.n_steps)
        return dict(method=m, rtol=self.rtol, atol=self.atol)

    def forward(self, x, c, frame=False, method=None):
        """Evaluate the chart; with ``frame=True`` also return ``w``."""
        model = self.model
        x = np.atleast_2d(np.asarray(x, float))
        c = np.atleast_2d(np.asarray(c, float))
        if x.shape[0] != c.shape[0]:
            x, c = _bcast(x, c)
        B = c.shape[0]
        y = x.copy()
        g = np.zeros((B, model.q))
        kw = self._flow_kw(method)
        frames = []
        for coef, col in self._factors(c):
            sec = Section(coef)
            if frame:
                var = variational_flow(model, sec, y, 1.0, **kw)
                res = var.flow
                frames.append((var.frame_matrix, col))
            else:
                res = integrate_flow(model, sec, y, 1.0, **kw)
            y = res.endpoint
            g = g + res.g
        arrow = GroupoidPoint(x, y, g)
        if not frame:
            return arrow
        w = np.zeros((B, self.n, self.n))
        after = np.broadcast_to(np.eye(self.n), (B, self.n, self.n)).copy()
        for E, col in reversed(frames):
            if col is not None:
                w[:, :, col] = after[:, :, col]
            after = after @ E
        return arrow, w

    def w_matrix(self, x, c, method=None):
        return self.forward(x, c, frame=True, method=method)[1]

    def in_domain(self, x, c, margin=0.0):
        """Membership in ``(-eps, eps)^p x T(r, M)`` (shrunk by ``margin``)."""
        if self.r is None:
            raise ChartError("chart domain has not been certified")
        mu, tau = self.split(c)
        rho = self.model.defining_function(np.atleast_2d(x))
        ok = rho < (1 - margin) * self.r * np.exp(-self.M * np.sum(np.abs(tau), axis=1))
        if mu.shape[1]:
            ok &= np.all(np.abs(mu) < (1 - margin) * self.eps, axis=1)
        return ok

    def seed(self, arrow):
        """Initial guess for the inverse: the flat-isotropy prediction."""
        model = self.model
        x = np.atleast_2d(arrow.source)
        tau = model.frame_scale(x)[:, : model.q] * arrow.g
        if model.p:
            base = self.forward(x, np.zeros((x.shape[0], self.n)))
            mu = wrap_angle(arrow.target[:, list(model.pair_index)] - base.target[:, list(model.pair_index)])
        else:
            mu = np.zeros((x.shape[0], 0))
        return self.join(mu, tau)

    def fiber_residual(self, a, b):
        """Fiber coordinates of ``a`` minus those of ``b`` (same sources)."""
        model = self.model
        d = model.fiber_coordinates(a) - model.fiber_coordinates(b)
        if model.pair_index:
            d[:, model.q :] = wrap_angle(d[:, model.q :])
        return d

    def inverse(self, arrow, c0=None, tol=1e-10, max_iter=50, method=None):
        """Damped Newton solve of ``forward(s(arrow), c) = arrow``.

        Returns ``(c, converged)``.
        """
        model = self.model
        x = np.atleast_2d(arrow.source)
        c = self.seed(arrow) if c0 is None else np.array(np.atleast_2d(c0), float)
        converged = np.zeros(x.shape[0], dtype=bool)
        cur, w = self.forward(x, c, frame=True, method=method)
        res = self.fiber_residual(arrow, cur)
        for _ in range(max_iter):
            err = np.max(np.abs(res), axis=1)
            converged = err < tol
            if np.all(converged):
                break
            s = model.frame_scale(cur.target)
            J = w / s[:, :, None]
            step = np.linalg.solve(J, res[..., None])[..., 0]
            step[converged] = 0.0
            lam = np.ones(x.shape[0])
            best_c, best_res, best_w, best_t = c, res, w, cur
            improved = np.zeros(x.shape[0], dtype=bool)
            new_c, new_res, new_w, new_t = c.copy(), res.copy(), w.copy(), cur
            for _k in range(8):
                trial = c + lam[:, None] * step
                tcur, tw = self.forward(x, trial, frame=True, method=method)
                tres = self.fiber_residual(arrow, tcur)
                ok = (np.max(np.abs(tres), axis=1) < err) & ~improved
                new_c[ok], new_res[ok], new_w[ok] = trial[ok], tres[ok], tw[ok]
                new_t = _merge_points(new_t, tcur, ok)
                improved |= ok
                if np.all(improved | converged):
                    break
                lam = np.where(improved, lam, 0.5 * lam)
            stuck = ~improved & ~converged
            if np.all(stuck | converged):
                break
            c, res, w, cur = new_c, new_res, new_w, new_t
        err = np.max(np.abs(res), axis=1)
        return c, err < tol

    def to_dict(self):
        return {
            "chart_id": self.chart_id,
            "word": [list(map(float, z)) for z in self.word],
            "eps": self.eps,
            "r": self.r,
            "M": self.M,
        }


def _bcast(x, c):
    if x.shape[0] == 1:
        return np.repeat(x, c.shape[0], 0), c
    if c.shape[0] == 1:
        return x, np.repeat(c, x.shape[0], 0)
    raise ValueError("incompatible batch sizes")


def _merge_points(base, new, mask):
    src, tgt, g = base.source.copy(), base.target.copy(), base.g.copy()
    src[mask], tgt[mask], g[mask] = new.source[mask], new.target[mask], new.g[mask]
    return GroupoidPoint(src, tgt, g)


def build_chart(model, chart_id=0, word=(), eps=0.5, **kw):
    """Build an exponential chart.

    ``word`` entries are coefficient vectors in the orthonormal frame and
    must lie in the span of the complement sections.
    """
    word = tuple(np.asarray(z, float) for z in word)
    for z in word:
        if z.shape != (model.n,) or np.any(z[: model.q] != 0):
            raise ValueError("word sections must lie in the span of the complement sections")
    if model.p == 0:
        eps = 0.0
    if "patch" in kw:
        patch = kw.pop("patch")
        if patch is not None and not _patch_meets_collar(model, patch):
            raise ChartError("patch is disjoint from the collar of the singular stratum")
    return ExpChart(model, chart_id, word, eps, **kw)


def _patch_meets_collar(model, patch):
    rho = model.collar_states(np.array([0.0]), n_dirs=4)
    return bool(np.any(patch.contains(rho)))


def default_charts(model, **kw):
    """The chart set used throughout: the empty word, and for models with a
    pair factor a second chart whose word shifts along the complement."""
    charts = [build_chart(model, 0, (), **kw)]
    if model.p:
        z = np.zeros(model.n)
        z[model.q] = 0.3
        charts.append(build_chart(model, 1, (z,), **kw))
    return charts


# ----------------------------------------------------------------------
@dataclass
class DomainCertificate:
    chart_id: int
    r0: float
    M: float
    eps: float
    C: float
    min_abs_det: float
    min_det_lower: float
    max_w_dev: float
    singular_w_dev: float
    collisions: int
    pairs_checked: int
    n_grid: int
    grid_hash: str
    fit: dict = field(default_factory=dict)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _grid_hash(*arrays):
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=float).tobytes())
    return h.hexdigest()[:16]


def chart_grid(chart, rho_levels, tau_max, n_tau, n_mu=5, n_dirs=4):
    """Sample points ``(x, c)``: collar points at the given distances (and on
    the singular stratum) times a tensor grid of coordinates."""
    model = chart.model
    rho_levels = np.concatenate([[0.0], np.asarray(rho_levels, float)])
    xs = model.collar_states(rho_levels, n_dirs=n_dirs)
    taus = np.linspace(-tau_max, tau_max, n_tau)
    axes = [taus] * model.q
    if model.p:
        axes += [np.linspace(-0.9 * chart.eps, 0.9 * chart.eps, n_mu)] * model.p
    C = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, model.n)
    X = np.repeat(xs, len(C), axis=0)
    Cc = np.tile(C, (len(xs), 1))
    return X, Cc, len(C)


def certify_domain(
    chart,
    rho_levels=None,
    tau_max=1.5,
    n_tau=7,
    n_mu=5,
    n_dirs=4,
    r_min=1e-6,
    injectivity_points=450,
    seed=DEFAULT_SEED,
    registry=None,
):
    """Certify that the chart is a local diffeomorphism on ``T(r0, M)``.

    Fits ``|w - I| <= rho(x) C exp(M |tau|_1)`` over the grid, takes
    ``r0 = 1 / (2C)`` and shrinks it until ``|w - I| + margin <= 1/2`` at all
    admissible grid points, where the margin bounds the variation of ``w``
    between neighbouring grid points.  Global injectivity is then probed by
    a random collision search.  The chart's ``r`` and ``M`` are set in place.
    """
    model = chart.model
    if rho_levels is None:
        rho_levels = np.geomspace(1e-3, 0.2, 8)
    X, Cc, per_x = chart_grid(chart, rho_levels, tau_max, n_tau, n_mu, n_dirs)
    _, w = chart.forward(X, Cc, frame=True)
    eye = np.eye(model.n)
    dev = np.linalg.norm(w - eye, ord=2, axis=(1, 2))
    rho = model.defining_function(X)
    tau1 = np.sum(np.abs(Cc[:, : model.q]), axis=1)
    sing = rho == 0
    singular_dev = float(np.max(np.abs(w[sing] - eye))) if np.any(sing) else 0.0
    fit = fit_exponential(f"chart{chart.chart_id}.frame_deviation", tau1[~sing], dev[~sing], scale=rho[~sing])
    if registry is not None:
        registry.publish(fit)
    C, M = max(fit.C, 1e-12), max(fit.M, 0.0)
    # variation of w across neighbouring coordinate grid points of one base point
    wv = w.reshape(-1, per_x, model.n, model.n)
    shape = [n_tau] * model.q + [n_mu] * model.p
    wg = wv.reshape((wv.shape[0],) + tuple(shape) + (model.n, model.n))
    margin = np.zeros(wg.shape[: 1 + model.n])
    for ax in range(1, 1 + model.n):
        if wg.shape[ax] < 2:
            continue
        d = np.linalg.norm(np.diff(wg, axis=ax), ord=2, axis=(-2, -1))
        pad_lo = [(0, 0)] * d.ndim
        pad_hi = [(0, 0)] * d.ndim
        pad_lo[ax] = (1, 0)
        pad_hi[ax] = (0, 1)
        margin = np.maximum(margin, np.maximum(np.pad(d, pad_lo), np.pad(d, pad_hi)))
    margin = 0.5 * margin.reshape(-1)
    # the grid only certifies base points up to its largest distance level
    r = min(1.0 / (2.0 * C), float(np.max(rho_levels)))
    while True:
        adm = rho < r * np.exp(-M * tau1)
        if np.all(dev[adm] + margin[adm] <= 0.5):
            break
        r *= 0.8
        if r < r_min:
            raise ChartError(f"chart {chart.chart_id}: certification failed for all r >= {r_min}")
    chart.r, chart.M = float(r), float(M)
    adm = chart.in_domain(X, Cc)
    dets = np.abs(np.linalg.det(w[adm]))
    sv = np.linalg.svd(w[adm], compute_uv=False)
    lower = np.prod(np.clip(sv - margin[adm, None], 0, None), axis=1)
    collisions, pairs = injectivity_search(chart, injectivity_points, seed)
    return DomainCertificate(
        chart.chart_id,
        chart.r,
        chart.M,
        chart.eps,
        C,
        float(np.min(dets)),
        float(np.min(lower)),
        float(np.max(dev[adm])),
        singular_dev,
        collisions,
        pairs,
        int(len(X)),
        _grid_hash(X, Cc),
        fit.to_dict(),
    )


def sample_domain(chart, rng, size, tau_max=1.5, n_sources=None, rho_frac=(1e-3, 0.9)):
    """Random admissible ``(x, c)`` inside the certified domain."""
    model = chart.model
    xs_all, cs_all = [], []
    need = size
    while need > 0:
        m = max(2 * need, 16)
        rho = chart.r * np.exp(rng.uniform(np.log(rho_frac[0]), np.log(rho_frac[1]), m))
        x = model.collar_states(np.atleast_1d(rho), n_dirs=1, rng=rng)[:m]
        if model.p:
            x = x[rng.permutation(len(x))[:m]]
        rho_x = model.defining_function(x)
        tmax = np.minimum(tau_max, np.log(chart.r / rho_x) / max(chart.M, 1e-12))
        tau = rng.uniform(-1, 1, (len(x), model.q))
        tau *= (0.9 * tmax / np.maximum(np.sum(np.abs(tau), axis=1), 1e-300))[:, None] * rng.uniform(0, 1, (len(x), 1))
        mu = rng.uniform(-0.9 * chart.eps, 0.9 * chart.eps, (len(x), model.p))
        c = chart.join(mu, tau)
        ok = chart.in_domain(x, c)
        xs_all.append(x[ok])
        cs_all.append(c[ok])
        need -= int(np.sum(ok))
    return np.concatenate(xs_all)[:size], np.concatenate(cs_all)[:size]


def injectivity_search(chart, points=450, seed=DEFAULT_SEED, n_sources=5, coord_tol=1e-3, arrow_tol=1e-6):
    """Random collision search: distinct admissible coordinates over the same
    base point whose arrows nearly coincide.  Returns ``(collisions, pairs)``."""
    rng = np.random.default_rng(seed)
    per = max(points // n_sources, 2)
    xs, _ = sample_domain(chart, rng, n_sources)
    collisions = pairs = 0
    for x in xs:
        rho = chart.model.defining_function(x[None])[0]
        tmax = min(1.5, np.log(chart.r / rho) / max(chart.M, 1e-12)) if rho > 0 else 1.5
        tau = rng.uniform(-1, 1, (per, chart.model.q))
        tau *= (0.95 * tmax / np.maximum(np.sum(np.abs(tau), axis=1), 1e-300))[:, None] * rng.uniform(0, 1, (per, 1))
        mu = rng.uniform(-0.95 * chart.eps, 0.95 * chart.eps, (per, chart.model.p))
        c = chart.join(mu, tau)
        a = chart.forward(np.repeat(x[None], per, 0), c)
        fc = chart.model.fiber_coordinates(a)
        i, j = np.triu_indices(per, 1)
        dc = np.max(np.abs(c[i] - c[j]), axis=1)
        da = fc[i] - fc[j]
        if chart.model.pair_index:
            da[:, chart.model.q :] = wrap_angle(da[:, chart.model.q :])
        da = np.max(np.abs(da), axis=1)
        collisions += int(np.sum((dc > coord_tol) & (da < arrow_tol)))
        pairs += len(i)
    return collisions, pairs


# ----------------------------------------------------------------------
@dataclass
class MultiplicationSolution:
    """Chart coordinates of ``exp(t S) x(x, mu, tau)`` along ``t``.

    ``coords[b, k]`` holds ``(psi, phi)`` at ``times[k]``; ``dcoords_dx``
    (optional) their derivatives in the collar coordinates of ``x``.
    """

    times: np.ndarray
    coords: np.ndarray
    dcoords_dx: np.ndarray | None
    vw_defect: float
    left_domain: np.ndarray
    q: int

    @property
    def psi(self):
        return self.coords[..., : self.q]

    @property
    def phi(self):
        return self.coords[..., self.q :]


def _velocity(chart, x, c, sec, method=None):
    w = chart.w_matrix(x, c, method=method)
    v = np.linalg.inv(w)
    return np.einsum("bij,bj->bi", v, sec), np.max(np.abs(np.einsum("bij,bjk->bik", v, w) - np.eye(chart.n)))


def multiply_exp(chart, x, c, section, t=1.0, n_out=5, derivatives=False, rtol=1e-10, atol=1e-11, fd_step=1e-5):
    """Coordinates of ``exp(t S)`` applied to the chart arrow ``x(x, c)``.

    Solves ``dc/dt = w(x, c)^{-1} s`` where ``s`` are the orthonormal
    coefficients of the constant section ``S``.  With ``derivatives=True``
    the adjoined linear system for ``dc/dx`` (collar coordinates) is
    integrated as well, with the derivatives of ``w^{-1} s`` taken by
    central differences of a fixed-step chart evaluation.
    """
    model = chart.model
    x = np.atleast_2d(np.asarray(x, float))
    c0 = np.atleast_2d(np.asarray(c, float))
    x, c0 = _bcast(x, c0) if x.shape[0] != c0.shape[0] else (x, c0)
    B, n = c0.shape
    sec = np.broadcast_to(np.asarray(section, float), (B, n))
    t = float(t)
    dim = model.dim
    defect = [0.0]
    xi0 = model.from_state(x)

    def rhs(s, z):
        c = z[: B * n].reshape(B, n)
        vel, d = _velocity(chart, x, c, sec)
        defect[0] = max(defect[0], d)
        out = [t * vel.ravel()]
        if derivatives:
            D = z[B * n :].reshape(B, n, dim)
            out.append(t * _adjoined(chart, xi0, c, sec, D, fd_step).ravel())
        return np.concatenate(out)

    z0 = [c0.ravel()]
    if derivatives:
        z0.append(np.zeros(B * n * dim))
    z0 = np.concatenate(z0)
    times = np.linspace(0.0, 1.0, n_out)
    sol = integrate.solve_ivp(rhs, (0.0, 1.0), z0, method="DOP853", rtol=rtol, atol=atol, t_eval=times)
    if sol.status != 0:
        raise ChartError(f"multiplication ODE failed: {sol.message}")
    Z = sol.y.T
    coords = np.swapaxes(Z[:, : B * n].reshape(n_out, B, n), 0, 1)
    coords[:, 0] = c0
    dc = None
    if derivatives:
        dc = np.swapaxes(Z[:, B * n :].reshape(n_out, B, n, dim), 0, 1)
        dc[:, 0] = 0.0
    left = np.zeros((B, n_out), dtype=bool)
    if chart.r is not None:
        for k in range(n_out):
            left[:, k] = ~chart.in_domain(x, coords[:, k])
    return MultiplicationSolution(times * t, coords, dc, defect[0], left, model.q)


def _adjoined(chart, xi0, c, sec, D, h):
    """``d/dt (dc/dx) = d_x F + d_c F . dc/dx`` with ``F = w^{-1} s``."""
    model = chart.model
    B, n = c.shape
    dim = xi0.shape[1]
    xs, cs = [], []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        xs += [model.to_state(xi0 + e), model.to_state(xi0 - e)]
        cs += [c, c]
    x0 = model.to_state(xi0)
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        xs += [x0, x0]
        cs += [c + e, c - e]
    X = np.concatenate(xs)
    Cc = np.concatenate(cs)
    S = np.tile(sec, (len(xs), 1))
    F, _ = _velocity(chart, X, Cc, S, method="rk4")
    F = F.reshape(len(xs), B, n)
    dFx = np.stack([(F[2 * k] - F[2 * k + 1]) / (2 * h) for k in range(dim)], -1)
    dFc = np.stack([(F[2 * (dim + k)] - F[2 * (dim + k) + 1]) / (2 * h) for k in range(n)], -1)
    return dFx + dFc @ D


def multiply_direct(chart, x, c, section, t=1.0):
    """The same arrow computed in the realization: flow of the section from the
    target of ``x(x, c)``, composed with ``x(x, c)``."""
    model = chart.model
    a = chart.forward(x, c)
    sec = Section(np.broadcast_to(np.asarray(section, float), (a.source.shape[0], model.n)))
    e = integrate_flow(model, sec, a.target, t, rtol=chart.rtol, atol=chart.atol)
    return model.multiply(e.arrow, a)


def multiplication_estimates(chart, x, c, sol, section_index, registry=None):
    """Fit and re-check the a-priori and integrated bounds on ``psi``.

    * a-priori: ``|v - I| <= rho(x) C2 exp(M2 |tau|_1)`` at every state;
    * integrated: ``|psi_j(t) - tau_j - delta_ji t| <= rho(x) C2 t exp(M2 (|tau|_1 + (1 + q C2 r) t))``;
    * the form ``rho(x) (q r)^-1 exp(M2 (|tau|_1 + q C2 r t))``.
    """
    model = chart.model
    q = model.q
    rho = model.defining_function(x)
    B, nt, n = sol.coords.shape
    states = sol.coords.reshape(-1, n)
    xs = np.repeat(x, nt, axis=0)
    w = chart.w_matrix(xs, states)
    v = np.linalg.inv(w)
    vdev = np.max(np.abs(v - np.eye(n)), axis=(1, 2))
    tau_norm = np.sum(np.abs(states[:, :q]), axis=1)
    rr = np.repeat(rho, nt)
    fit = fit_exponential(f"chart{chart.chart_id}.velocity_deviation.S{section_index}", tau_norm, vdev, scale=rr)
    if registry is not None:
        registry.publish(fit)
    C2, M2 = fit.C, max(fit.M, 0.0)
    t = sol.times[None, :]
    tau0 = np.sum(np.abs(sol.coords[:, :1, :q]), axis=2)
    delta = np.zeros(n)
    delta[section_index] = 1.0
    dev = np.max(np.abs(sol.coords[:, :, :q] - sol.coords[:, :1, :q] - delta[None, None, :q] * t[..., None]), axis=2)
    r = chart.r
    prior = rho[:, None] * C2 * t * np.exp(M2 * (tau0 + (1 + q * C2 * r) * t))
    stated = rho[:, None] / (q * r) * np.exp(M2 * (tau0 + q * C2 * r * t))
    return {
        "C": C2,
        "M": M2,
        "velocity_fit_violations": fit.violations,
        "a_priori_violations": int(np.sum(dev > prior * (1 + 1e-9) + 1e-15)),
        "integrated_violations": int(np.sum(dev > stated)),
        "max_deviation": float(np.max(dev)),
        "max_a_priori_ratio": float(np.max(np.where(prior > 0, dev / np.where(prior > 0, prior, 1), 0))),
    }


# ----------------------------------------------------------------------
def select_chart(charts, arrow, margin=0.1, **kw):
    """Smallest chart id whose certified domain contains the arrow with the
    given relative margin.  Returns ``(chart, coords)`` per batch element as
    lists."""
    B = np.atleast_2d(arrow.source).shape[0]
    chosen = [None] * B
    coords = np.full((B, charts[0].n), np.nan)
    for ch in sorted(charts, key=lambda c: c.chart_id):
        todo = np.array([k for k in range(B) if chosen[k] is None])
        if len(todo) == 0:
            break
        c, ok = ch.inverse(arrow[todo], **kw)
        ok &= ch.in_domain(arrow.source[todo], c, margin=margin)
        for j, k in enumerate(todo):
            if ok[j]:
                chosen[k] = ch.chart_id
                coords[k] = c[j]
    return chosen, coords


def change_coordinates(source_chart, target_chart, arrow, coords=None, tol=1e-10):
    """Coordinates of ``arrow`` in ``target_chart``.

    Newton is seeded with the prediction that ``tau`` is unchanged and ``mu``
    moves by the rigid difference of the two charts' words.
    """
    if source_chart is target_chart and coords is not None:
        return np.atleast_2d(coords).copy()
    model = target_chart.model
    x = np.atleast_2d(arrow.source)
    seed = None
    if coords is not None:
        seed = np.atleast_2d(coords).copy()
        if model.p:
            z = np.zeros((x.shape[0], model.n))
            b0 = source_chart.forward(x, z).target[:, list(model.pair_index)]
            b1 = target_chart.forward(x, z).target[:, list(model.pair_index)]
            seed[:, model.q :] += wrap_angle(b0 - b1)
    c, ok = target_chart.inverse(arrow, c0=seed, tol=tol)
    if not np.all(ok):
        c2, ok2 = target_chart.inverse(arrow, tol=tol)
        c = np.where(ok[:, None], c, c2)
        ok = ok | ok2
    if not np.all(ok):
        raise ChartError("arrow outside the target chart image")
    return c


# ----------------------------------------------------------------------
@dataclass
class ChainResult:
    arrows: list
    coords: list
    chart_ids: list
    V_norm: np.ndarray | None
    ode_deviation: np.ndarray | None


def _word_factors(chart, c):
    return [coef for coef, _ in chart._factors(c)]


def chain_direct(charts, words, x, method=None):
    """Left-multiply the bisections ``x^(alpha_i)(mu_i, tau_i)`` in order,
    evaluated in the realization.  Returns the arrow after each step."""
    model = charts[0].model
    x = np.atleast_2d(x)
    a = model.unit(x)
    out = []
    for alpha, c in words:
        ch = charts[alpha]
        s = ch.forward(a.target, c, method=method)
        a = model.multiply(s, a)
        out.append(a)
    return out


def chain_ode(charts, words, x, rtol=1e-10, atol=1e-11):
    """The same chain through the multiplication ODE of the first chart."""
    x = np.atleast_2d(x)
    alpha0, c = words[0]
    base = charts[alpha0]
    c = np.atleast_2d(c).copy()
    out = [c.copy()]
    for alpha, cw in words[1:]:
        for coef in _word_factors(charts[alpha], np.atleast_2d(cw)):
            if not np.any(coef):
                continue
            sol = multiply_exp(base, x, c, coef, 1.0, n_out=2, rtol=rtol, atol=atol)
            c = sol.coords[:, -1]
        out.append(c.copy())
    return base, out


def chain_compose(charts, words, x, fd_step=1e-5, with_ode=False, with_V=True, margin=0.1):
    """Compose a chain of chart bisections and record its growth data.

    Parameters
    ----------
    charts : list of ExpChart
    words : list of ``(alpha, c)``
        Chart index and coordinates ``(tau, mu)`` (batched) for each factor.
    x : ndarray
        Base points.

    Returns a :class:`ChainResult` whose ``V_norm[k]`` is the norm of the
    vertical part of the pushforward of ``d/dx`` after ``k+1`` factors,
    maximized over unit directions of the base metric.
    """
    model = charts[0].model
    x = np.atleast_2d(x)
    B = x.shape[0]
    arrows = chain_direct(charts, words, x)
    ids, coords = [], []
    for a in arrows:
        chosen, c = select_chart(charts, a, margin=margin)
        if any(cid is None for cid in chosen):
            bad = [k for k, cid in enumerate(chosen) if cid is None]
            raise ChartError(f"chain left every chart domain at step {len(ids) + 1} (samples {bad[:5]})")
        ids.append(chosen)
        coords.append(c)
    V = None
    if with_V:
        V = _chain_vertical(charts, words, x, ids, coords, fd_step)
    dev = None
    if with_ode:
        base, ode_coords = chain_ode(charts, words, x)
        dev = np.stack([model.arrow_distance(base.forward(x, c), a) for c, a in zip(ode_coords, arrows)])
    return ChainResult(arrows, coords, ids, V, dev)


def _chain_vertical(charts, words, x, ids, coords, h):
    model = charts[0].model
    B = x.shape[0]
    dim = model.dim
    xi = model.from_state(x)
    pert = []
    for k in range(dim):
        e = np.zeros(dim)
        e[k] = h
        pert += [model.to_state(xi + e), model.to_state(xi - e)]
    X = np.concatenate(pert)
    rep = len(pert)
    W = [(al, np.tile(np.atleast_2d(c), (rep, 1))) for al, c in words]
    arrows = chain_direct(charts, W, X, method="rk4")
    # metric normalization of the collar directions
    G = model.base.metric(model.base.patches[0].name, xi) if model.name != "cylinder-product" else model.base.metric("collar", xi)
    L = np.linalg.cholesky(np.linalg.inv(G))  # columns give a unit frame in collar coordinates
    out = np.zeros((len(words), B))
    for step, a in enumerate(arrows):
        fc = model.fiber_coordinates(a).reshape(rep, B, -1)
        tgt = a.target.reshape(rep, B, -1)
        cid = np.array(ids[step])
        c = coords[step]
        ref = np.zeros_like(fc)
        for ch in charts:
            m = cid == ch.chart_id
            if not np.any(m):
                continue
            b = ch.forward(X.reshape(rep, B, -1)[:, m].reshape(-1, X.shape[1]), np.tile(c[m], (rep, 1)), method="rk4")
            ref[:, m] = model.fiber_coordinates(b).reshape(rep, int(m.sum()), -1)
        diff = fc - ref
        if model.pair_index:
            diff[..., model.q :] = wrap_angle(diff[..., model.q :])
        dV = np.stack([(diff[2 * k] - diff[2 * k + 1]) / (2 * h) for k in range(dim)], -1)  # (B, n, dim)
        s = model.frame_scale(tgt[0])
        dV = s[:, :, None] * dV
        out[step] = np.linalg.norm(dV @ L, ord=2, axis=(1, 2))
    return out


def random_words(charts, rng, k, B, tau_scale=1.0, mu_spread=0.03):
    """Random chain words with ``|tau|_1 <= tau_scale``.

    The ``mu`` coordinates cancel the rigid shift of the chart's own word up
    to a uniform perturbation of size ``mu_spread``, so that long chains
    stay inside the chart domains along the complement directions.
    """
    model = charts[0].model
    words = []
    for _ in range(k):
        alpha = int(rng.integers(len(charts)))
        ch = charts[alpha]
        tau = rng.uniform(-1, 1, (B, model.q))
        tau *= (tau_scale * rng.uniform(0, 1, (B, 1))) / np.maximum(np.sum(np.abs(tau), axis=1, keepdims=True), 1e-300)
        shift = np.sum([z[model.q :] for z in ch.word], axis=0) if ch.word else np.zeros(model.p)
        mu = -shift + rng.uniform(-mu_spread, mu_spread, (B, model.p))
        words.append((alpha, ch.join(mu, tau)))
    return words


def chain_start_radius(charts, k, tau_scale=1.0, margin=0.1):
    """Distance to the singular set from which ``k`` factors with
    ``|tau|_1 <= tau_scale`` stay inside every certified domain (the chain's
    ``tau`` is at most additive in the factors)."""
    worst = min(ch.r * math.exp(-ch.M * (k * tau_scale + 1.0)) for ch in charts)
    return 0.5 * (1 - margin) * worst


def fit_chain_growth(V_norm, registry=None, name="chain.vertical_growth"):
    """Fit ``sup |V| <= C exp(M k)`` over chain lengths ``k = 1..K``."""
    K = V_norm.shape[0]
    ks = np.repeat(np.arange(1, K + 1), V_norm.shape[1])
    fit = fit_exponential(name, ks, V_norm.ravel())
    if registry is not None:
        registry.publish(fit)
    return fit


def overlap_estimates(chart_a, chart_b, rng, size=100, h=1e-5, registry=None):
    """Fit the change-of-coordinates bounds ``|psi - tau| <= rho C exp(M |tau|)``
    and ``|d_x psi| <= C exp(M |tau|)`` between two charts."""
    model = chart_a.model
    x, c = sample_domain(chart_a, rng, size, tau_max=1.0)
    a = chart_a.forward(x, c)
    cb = change_coordinates(chart_a, chart_b, a, coords=c, tol=1e-12)
    q = model.q
    rho = model.defining_function(x)
    tau1 = np.sum(np.abs(c[:, :q]), axis=1)
    dpsi = np.max(np.abs(cb[:, :q] - c[:, :q]), axis=1)
    f1 = fit_exponential(f"overlap{chart_a.chart_id}{chart_b.chart_id}.tau_shift", tau1, dpsi, scale=rho)
    xi = model.from_state(x)
    ders = []
    for k in range(model.dim):
        e = np.zeros(model.dim)
        e[k] = h
        vals = []
        for sgn in (1, -1):
            xp = model.to_state(xi + sgn * e)
            ap = chart_a.forward(xp, c)
            vals.append(change_coordinates(chart_a, chart_b, ap, coords=cb, tol=1e-12)[:, :q])
        ders.append((vals[0] - vals[1]) / (2 * h))
    dnorm = np.max(np.abs(np.stack(ders, -1)), axis=(1, 2))
    f2 = fit_exponential(f"overlap{chart_a.chart_id}{chart_b.chart_id}.tau_derivative", tau1, dnorm)
    if registry is not None:
        registry.publish(f1)
        registry.publish(f2)
    return f1, f2


def vertical_pushforward_growth(chart, x, c, section_index, ts, registry=None):
    """Growth of ``|d(exp t S) d/dtau_k| / |d/dtau_k|`` in ``t``.

    The pushforward of a vertical vector by left multiplication with the
    bisection ``exp tS`` is ``E_{tS}`` applied at the target.  Returns the
    global fit and the per-sample fitted rates.
    """
    model = chart.model
    a, w = chart.forward(x, c, frame=True)
    sec = np.zeros(model.n)
    sec[section_index] = 1.0
    B = a.target.shape[0]
    ratios = []
    for t in ts:
        var = variational_flow(model, Section(sec), a.target, t, rtol=chart.rtol, atol=chart.atol)
        pushed = var.frame_matrix @ w
        ratios.append(np.linalg.norm(pushed, axis=1) / np.linalg.norm(w, axis=1))
    R = np.stack(ratios)  # (nt, B, n)
    tt = np.repeat(np.asarray(ts, float), B * model.n)
    fit = fit_exponential(f"chart{chart.chart_id}.vertical_pushforward", tt, R.ravel())
    if registry is not None:
        registry.publish(fit)
    per = np.array([np.polyfit(ts, np.log(R[:, b].max(axis=1)), 1)[0] for b in range(B)])
    return fit, per
