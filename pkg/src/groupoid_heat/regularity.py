"""Reduced kernels on exponential charts and derivative estimates near the
singular stratum.

Cut-off convolution chains are evaluated on a single source fiber ``G_x``
in arclength coordinates.  A factor ``chi(2 r^-1 s*rho) k`` in the chain
multiplies the integration variable by the cutoff profile
``c_x(sigma) = chi(2 r^-1 rho(t(b)))`` before the line convolution; the
innermost factor only sees ``rho(x)`` and is constant on the fiber.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cutoff import smooth_step
from .fitting import EstimateRegistry, fit_exponential
from .heat import FiberGeometry, arclength, gauss_legendre, volterra_sum
from .models import DEFAULT_SEED, GroupoidPoint


def chi(r):
    """Cutoff equal to 1 on ``[0, 1/2]`` and 0 on ``[1, inf)``."""
    return smooth_step(np.abs(r), 1.0)


def orbit_parameter(model, x, z, tol=1e-13):
    """Group element ``g`` with ``act(x, g) = z`` on a one-dimensional orbit.

    Bisection in ``g`` (the orbit map is monotone) followed by Newton polish.
    """
    if model.q != 1 or model.p != 0:
        raise NotImplementedError("pair arrows are resolved on one-dimensional orbits only")
    x = np.atleast_1d(np.asarray(x, float))
    z = np.atleast_1d(np.asarray(z, float))
    x, z = np.broadcast_arrays(x, z)
    tx = np.mod(x[..., 0], 2 * np.pi)
    tz = np.mod(z[..., 0], 2 * np.pi)

    def pos(g):
        return np.mod(model.act(x, g[..., None])[..., 0], 2 * np.pi)

    lo = np.full(tx.shape, -1.0)
    hi = np.full(tx.shape, 1.0)
    for _ in range(60):
        bad = pos(lo) > tz
        if not np.any(bad):
            break
        lo[bad] *= 2
    for _ in range(60):
        bad = pos(hi) < tz
        if not np.any(bad):
            break
        hi[bad] *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        up = pos(mid) > tz
        hi = np.where(up, mid, hi)
        lo = np.where(up, lo, mid)
        if np.max(hi - lo) < 1e-9 * max(1.0, np.max(np.abs(hi))):
            break
    g = 0.5 * (lo + hi)
    for _ in range(5):
        y = model.act(x, g[..., None])
        d = np.mod(y[..., 0] - tz + np.pi, 2 * np.pi) - np.pi
        g = g - d / model.anchor(y)[..., 0, 0]
        if np.max(np.abs(d)) < tol:
            break
    return g


def pair_arrow(model, z, x):
    """The arrow with source ``x`` and target ``z`` over the open stratum."""
    g = orbit_parameter(model, x, z)
    x = np.atleast_2d(np.asarray(x, float))
    z = np.atleast_2d(np.asarray(z, float))
    x, z = np.broadcast_arrays(x, z)
    return GroupoidPoint(x.copy(), model.act(x, g[..., None]), g[..., None])


def pushforward_identity_check(model, n=200, seed=DEFAULT_SEED, step=1e-6):
    """Compare finite differences through the pair embedding with
    right-translated lifts through the inverse anchor.

    Moving the target by ``V`` changes the group element by ``nu^-1(V)``;
    moving the source by ``W`` changes it by ``-nu^-1(W)``.
    """
    rng = np.random.default_rng(seed)
    x = model.random_states(rng, n)
    z = model.random_states(rng, n)
    keep = (model.defining_function(x) > 0.05) & (model.defining_function(z) > 0.05)
    x, z = x[keep], z[keep]
    g0 = orbit_parameter(model, x, z)
    dz = (orbit_parameter(model, x, z + step) - orbit_parameter(model, x, z - step)) / (2 * step)
    dx = (orbit_parameter(model, x + step, z) - orbit_parameter(model, x - step, z)) / (2 * step)
    lift_t = 1.0 / model.anchor(z)[..., 0, 0]
    lift_s = -1.0 / model.anchor(x)[..., 0, 0]
    dev_t = np.max(np.abs(dz - lift_t) / np.abs(lift_t))
    dev_s = np.max(np.abs(dx - lift_s) / np.abs(lift_s))
    return {"target": float(dev_t), "source": float(dev_s), "n": int(len(g0))}


# ----------------------------------------------------------------------
class ReducedKernelView:
    """A radial fiber kernel pulled back to coordinates on the groupoid.

    ``coordinates="chart"`` uses the exponential chart ``(x, tau)``;
    ``coordinates="realization"`` uses ``(x, g)`` of the action realization.
    """

    def __init__(self, model, kernel, chart=None, coordinates="realization"):
        if coordinates not in ("chart", "realization"):
            raise ValueError("coordinates must be 'chart' or 'realization'")
        if coordinates == "chart" and chart is None:
            raise ValueError("chart coordinates need a chart")
        self.model = model
        self.kernel = kernel
        self.chart = chart
        self.coordinates = coordinates

    @property
    def chart_id(self):
        return None if self.chart is None else self.chart.chart_id

    def arrows(self, x, c):
        x = np.atleast_2d(np.asarray(x, float))
        c = np.atleast_2d(np.asarray(c, float))
        x, c = np.broadcast_arrays(x, c)
        if self.coordinates == "chart":
            return self.chart.forward(x, c)
        return GroupoidPoint(x.copy(), self.model.act(x, c), c.copy())

    def values(self, x, c, index=-1):
        return self.kernel.on_arrows(self.model, self.arrows(x, c), index)

    def derivative(self, x, c, order=1, step=1e-3, direction="x", index=-1):
        """Central finite difference of order 1 or 2 (fourth-order stencils).

        ``direction`` is ``"x"`` (base point at fixed fiber coordinate),
        ``"c"`` (fiber coordinate) or ``"xt"`` (first ``x`` then time).
        """
        x = np.atleast_2d(np.asarray(x, float))
        c = np.atleast_2d(np.asarray(c, float))
        if direction == "xt":
            ds = self.kernel.times[1] - self.kernel.times[0]
            i = index % len(self.kernel.times)
            rows = [self.derivative(x, c, 1, step, "x", i + k) for k in (-2, -1, 1, 2)]
            return (rows[0] - 8 * rows[1] + 8 * rows[2] - rows[3]) / (12 * ds)

        def f(k):
            if direction == "x":
                return self.values(x + k * step, c, index)
            return self.values(x, c + k * step, index)

        fm2, fm1, fp1, fp2 = f(-2), f(-1), f(1), f(2)
        if order == 1:
            return (fm2 - 8 * fm1 + 8 * fp1 - fp2) / (12 * step)
        if order == 2:
            return (-fm2 + 16 * fm1 - 30 * f(0) + 16 * fp1 - fp2) / (12 * step * step)
        raise ValueError("order must be 1 or 2")


def reduced_pairing(model, kernel, f, n_theta=256, box=(-6.0, 6.0), panel=0.1, nodes=16, index=-1, tail_tol=1e-10):
    """Pair a fiber kernel with a test function on the groupoid.

    ``int_M int_{G_x} Q(b^-1) f(b^-1) db dx``: the unit restriction of the
    operator applied to the inverted test function, integrated over the base
    (periodic trapezoid rule) with composite Gauss-Legendre along fibers.
    ``kernel`` is a :class:`FiberKernel` or a callable on arrows.
    """
    if model.state_dim != 1:
        raise NotImplementedError("reduced pairing is implemented on a circle base")
    kfun = kernel if callable(kernel) else (lambda a: kernel.on_arrows(model, a, index))
    theta = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    lo, hi = box
    P = max(1, int(math.ceil((hi - lo) / panel)))
    t, w = gauss_legendre(nodes)
    edges = np.linspace(lo, hi, P + 1)
    half = 0.5 * np.diff(edges)
    g = ((0.5 * (edges[:-1] + edges[1:]))[:, None] + half[:, None] * t).ravel()
    wg = (half[:, None] * w).ravel()
    X = np.broadcast_to(theta[:, None, None], (n_theta, g.size, 1))
    G = np.broadcast_to(g[None, :, None], X.shape)
    y = model.act(X, G)
    inv = GroupoidPoint(y.reshape(-1, 1), np.array(X).reshape(-1, 1), -np.array(G).reshape(-1, 1))
    fv = np.asarray(f(inv), float).reshape(n_theta, g.size)
    if np.max(np.abs(fv[:, :nodes]), initial=0.0) > tail_tol or np.max(np.abs(fv[:, -nodes:]), initial=0.0) > tail_tol:
        raise ValueError("test function support escapes the fiber box")
    kv = np.asarray(kfun(inv), float).reshape(n_theta, g.size)
    dens = np.sqrt(model.h(y))
    inner = (kv * fv * dens) @ wg
    return float(inner.sum() * 2 * np.pi / n_theta)


def unit_integral(model, f, n_theta=256):
    """``int_M f(u(x)) dx`` for a test function on arrows."""
    theta = 2 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    X = theta[:, None]
    return float(np.sum(f(model.unit(X))) * 2 * np.pi / n_theta)


# ----------------------------------------------------------------------
def cutoff_profile(model, x, u, r, scale=1.0):
    """``chi(2 scale rho(t(b)) / r)`` at signed arclength ``u`` along ``G_x``."""
    geom = FiberGeometry(model, x)
    g = geom.inverse_arclength(u)
    y = model.act(np.broadcast_to(geom.x, (u.size, geom.x.size)), g[:, None])
    return chi(2 * scale * model.defining_function(y) / r)


def cut_chains(grid, model, x, r, H, k_max):
    """Final-time rows of the cut-off chains for ``k = 0..k_max``.

    ``K^(k) = chi(2 r^-1 H^k rho(x)) G*(c (R*(c (... c R))))`` with ``k - 1``
    convolutions by the remainder and ``c`` the cutoff profile on ``G_x``.
    """
    c = cutoff_profile(model, x, grid.u, r)[None, :]
    rho = float(model.defining_function(np.atleast_1d(np.asarray(x, float)))[()])
    rows = [chi(2 * rho / r) * grid.G[-1]]
    B = grid.R
    for k in range(1, k_max + 1):
        if k > 1:
            B = grid.apply_R(c * B)
        rows.append(chi(2 * H**k * rho / r) * grid.apply_G(c * B)[-1])
    return np.array(rows)


def decomposed_chains(grid, model, x, r, H, k):
    """All ``2^(k+1)`` cutoff/complement combinations of a ``k``-fold chain.

    Returns a dict keyed by tuples of booleans (``True`` = cutoff,
    ``False`` = complement), factor 0 first.
    """
    c = cutoff_profile(model, x, grid.u, r)[None, :]
    rho = float(model.defining_function(np.atleast_1d(np.asarray(x, float)))[()])
    inner = chi(2 * H**k * rho / r) if k > 0 else chi(2 * rho / r)
    out = {}
    for mask in range(2 ** (k + 1)):
        bits = tuple(bool((mask >> i) & 1) for i in range(k + 1))
        ck = inner if bits[k] else 1.0 - inner
        if k == 0:
            out[bits] = ck * grid.G[-1]
            continue
        B = grid.R * ck
        for i in range(k - 1, 0, -1):
            B = grid.apply_R((c if bits[i] else 1.0 - c) * B)
        out[bits] = grid.apply_G((c if bits[0] else 1.0 - c) * B)[-1]
    return out


def support_bound(r, H, omega, k, reach=1.0):
    """Lower bound on ``rho(s(a))`` for chains containing a complementary
    cutoff: ``(r/4) H^-k exp(-(k+1) omega reach)``."""
    return 0.25 * r * H ** (-k) * math.exp(-(k + 1) * omega * reach)


def support_bound_check(model, r, H, omega, k, n_surviving=1000, reach=1.0, seed=DEFAULT_SEED, max_draws=200000):
    """Sample chain configurations with at least one complementary cutoff
    and check the lower bound on ``rho(s(a))`` at every surviving one.

    A configuration is a source ``x``, chain points at arclength steps of at
    most ``reach`` (the support radius of the parametrix), and a random
    non-trivial cutoff pattern.
    """
    rng = np.random.default_rng(seed)
    bound = support_bound(r, H, omega, k, reach)
    found, viol, worst, draws = 0, 0, np.inf, 0
    while found < n_surviving and draws < max_draws:
        m = 2000
        draws += m
        rho0 = np.exp(rng.uniform(np.log(1e-6), np.log(0.5), m))
        x = rho0[:, None] * rng.choice([-1.0, 1.0], (m, 1))
        steps = rng.uniform(-reach, reach, (m, k + 1))
        pts = [x]
        for i in range(k):
            cur = pts[-1]
            gg = _inverse_arclength_batch(model, cur, steps[:, i])
            pts.append(model.act(cur, gg[:, None]))
        # factor k sits at x with the H^k cutoff; factor i < k sits at pts[k - i]
        pattern = rng.integers(0, 2, (m, k + 1)).astype(bool)
        pattern[np.all(pattern, axis=1), rng.integers(0, k + 1)] = False
        weight = np.ones(m)
        for i in range(k + 1):
            y = pts[k - i]
            sc = H**k if i == k else 1.0
            ci = chi(2 * sc * model.defining_function(y) / r)
            weight *= np.where(pattern[:, i], ci, 1.0 - ci)
        alive = weight > 0
        take = np.flatnonzero(alive)[: n_surviving - found]
        found += take.size
        rx = model.defining_function(x[take])
        viol += int(np.sum(rx < bound))
        if take.size:
            worst = min(worst, float(np.min(rx / bound)))
    return {"bound": bound, "surviving": found, "violations": viol, "min_ratio": worst}


def _inverse_arclength_batch(model, x, sigma, iters=40):
    g = sigma / np.sqrt(model.h(x))
    for _ in range(iters):
        f = arclength(model, x, g) - sigma
        y = model.act(x, g[:, None])
        g = g - f / np.sqrt(model.h(y))
        if np.max(np.abs(f)) < 1e-12:
            break
    return g


def chain_constants(model, report, r):
    """``H`` (per-step cutoff factor) from the fiber growth rate of ``rho``."""
    return math.exp(report.omega_global)


def _sample_sources(lo, hi, n_levels):
    lev = np.geomspace(lo, hi, n_levels)
    return np.concatenate([lev, -lev])[:, None]


def on_diagonal_growth(
    model, P, t, k_max=6, r=0.2, H=2.0, n_levels=24, du=0.01, max_ds=5e-4, registry=None, name=None
):
    """Fit ``sup |d_x K^(k)| <= S_k C exp(M k)`` for the cut-off chains.

    ``d_x`` is taken in chart coordinates (fixed arclength ``tau`` along the
    fiber) with step ``rho(x)/8``; ``S_k = sup |Q^(k)|`` of the uncut series
    on the same grid normalizes away the factorial decay in ``k`` so that the
    fitted rate measures geometric growth only.
    """
    from .heat import space_time_grid

    grid = space_time_grid(P, t, du, max_ds)
    S = np.array(volterra_sum(P, t, k_max, grid=grid).sup_norms)
    # sources cover every cutoff transition window [r/(4 H^k), r/2]
    xs = _sample_sources(0.2 * r / H**k_max, 0.6 * r, n_levels)
    dx = np.zeros((k_max + 1, len(xs)))
    dtau = np.zeros_like(dx)
    val = np.zeros_like(dx)
    h = grid.du
    for j, x in enumerate(xs):
        step = abs(x[0]) / 8
        Km = cut_chains(grid, model, x - step, r, H, k_max)
        K0 = cut_chains(grid, model, x, r, H, k_max)
        Kp = cut_chains(grid, model, x + step, r, H, k_max)
        dx[:, j] = np.max(np.abs(Kp - Km), axis=1) / (2 * step)
        dtau[:, j] = np.max(np.abs(K0[:, 2:] - K0[:, :-2]), axis=1) / (2 * h)
        val[:, j] = np.max(np.abs(K0), axis=1)
    ks = np.arange(1, k_max + 1)
    D = dx[1:].max(axis=1)
    fit = fit_exponential(name or f"on_diagonal.t={t:g}.N={P.order}", ks, D, scale=S[1:], floor=1e-300)
    fit.meta = {
        "t": t,
        "N": P.order,
        "r": r,
        "H": H,
        "sup_dx": D.tolist(),
        "sup_dtau": dtau[1:].max(axis=1).tolist(),
        "sup_value": val[1:].max(axis=1).tolist(),
        "series_sup": S[1:].tolist(),
        "k0_dx": float(dx[0].max()),
        "sources": xs[:, 0].tolist(),
    }
    if registry is not None:
        registry.publish(fit)
    return fit


def off_diagonal_growth(
    model, report, P, t, k_max=6, r=0.2, H=2.0, n_levels=24, du=0.01, max_ds=5e-4, targets=None, registry=None, name=None
):
    """Fit the growth of the source derivative of the complementary part.

    On the open stratum the complementary part is ``Q^(k) - K^(k)`` read in
    pair coordinates ``(t(a), s(a))``; it is differentiated in the source
    with the target fixed.  Sources are restricted to the region where the
    complement can be non-zero (:func:`support_bound`).
    """
    if report.classification == "neither":
        raise ValueError("off-diagonal estimates need a non-degenerate or uniformly degenerate groupoid")
    from .heat import space_time_grid
    from scipy.interpolate import make_interp_spline

    grid = space_time_grid(P, t, du, max_ds)
    vs = volterra_sum(P, t, k_max, grid=grid, keep_components=True)
    S = np.array(vs.sup_norms)
    full = vs.components
    omega = report.omega_global
    lo = support_bound(r, H, omega, k_max)
    xs = _sample_sources(lo, 0.45, n_levels)
    if targets is None:
        targets = np.array([[-2.0], [-0.7], [0.4], [1.5], [2.6]])
    dx = np.zeros((k_max + 1, len(xs)))
    amp = np.zeros(len(xs))
    for j, x in enumerate(xs):
        step = abs(x[0]) / 8
        diffs = []
        for xx in (x - step, x + step):
            K = cut_chains(grid, model, xx, r, H, k_max)
            off = full - K
            z = np.broadcast_to(targets, targets.shape)
            g = orbit_parameter(model, np.broadcast_to(xx, z.shape), z)
            sig = arclength(model, np.broadcast_to(xx, z.shape), g)
            vals = np.array([make_interp_spline(grid.u, row, k=5)(sig) for row in off])
            diffs.append(vals)
        dx[:, j] = np.max(np.abs(diffs[1] - diffs[0]), axis=1) / (2 * step)
        rho = float(np.atleast_1d(model.defining_function(x))[0])
        amp[j] = 1.0 / (report.omega_prime * rho**report.lam_prime)
    ks = np.arange(1, k_max + 1)
    D = dx[1:].max(axis=1)
    fit = fit_exponential(name or f"off_diagonal.t={t:g}.N={P.order}", ks, D, scale=S[1:], floor=1e-300)
    fit.meta = {
        "t": t,
        "N": P.order,
        "r": r,
        "H": H,
        "support_bound": lo,
        "sup_dx": D.tolist(),
        "series_sup": S[1:].tolist(),
        "max_amplification": float(amp.max()),
        "sources": xs[:, 0].tolist(),
    }
    if registry is not None:
        registry.publish(fit)
    return fit


# ----------------------------------------------------------------------
@dataclass
class RegularityReport:
    """Derivative profiles along a ladder of distances to the singular set,
    growth fits and verdicts.  Verdicts are numerical evidence only."""

    profiles: list = field(default_factory=list)
    fits: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(v == "PASS" for v in self.verdicts.values())

    def to_dict(self):
        return {
            "profiles": self.profiles,
            "fits": {k: v.to_dict() for k, v in sorted(self.fits.items())},
            "verdicts": dict(sorted(self.verdicts.items())),
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "order", "kind", "value", "refinement_delta", "verdict"])
        for p in self.profiles:
            for rho, v, d in zip(p["rho"], p["value"], p["refinement_delta"]):
                w.writerow([repr(rho), p["order"], p["kind"], repr(v), repr(d), p["verdict"]])
        return buf.getvalue()


def transverse_smoothness(
    model,
    kernel,
    orders=(1, 2),
    ladder=None,
    g_values=(0.3, 0.7, -0.5),
    sides=(1.0, -1.0),
    mixed=True,
    bound_factor=10.0,
    stable_tol=0.1,
    floor=1e-9,
):
    """Transverse finite-difference derivatives of the kernel along a ladder
    ``rho = 2^-1 .. 2^-10``.

    Derivatives are taken in the base point at fixed group component (the
    realization is a smooth chart of the groupoid across the singular set),
    with step ``rho/8`` and again with ``rho/16``.  An order passes when the
    profile is bounded along the ladder (largest value at most
    ``bound_factor`` times the median) and the two steps agree to
    ``stable_tol`` at the two finest levels.
    """
    if not kernel.converged:
        raise ValueError("kernel series did not converge")
    if ladder is None:
        ladder = 2.0 ** -np.arange(1, 11)
    ladder = np.asarray(ladder, float)
    view = ReducedKernelView(model, kernel)
    g = np.asarray(g_values, float)
    rep = RegularityReport(meta={"t": kernel.t, "ladder": ladder.tolist(), "g_values": g.tolist()})
    kinds = [("x", o) for o in orders] + ([("xt", 1)] if mixed else [])
    for kind, order in kinds:
        vals, deltas = [], []
        for rho in ladder:
            best, delta = 0.0, 0.0
            for sd in sides:
                x = np.full((g.size, 1), sd * rho)
                c = g[:, None]
                a = view.derivative(x, c, order, rho / 8, kind)
                b = view.derivative(x, c, order, rho / 16, kind)
                best = max(best, float(np.max(np.abs(b))))
                scale = np.maximum(np.abs(b), floor)
                delta = max(delta, float(np.max(np.abs(a - b) / scale)))
            vals.append(best)
            deltas.append(delta)
        vals = np.array(vals)
        bounded = bool(np.all(np.isfinite(vals)) and vals.max() <= bound_factor * max(np.median(vals), floor))
        stable = bool(max(deltas[-2:]) < stable_tol or vals[-2:].max() < floor)
        verdict = "PASS" if bounded and stable else ("INCONCLUSIVE" if bounded else "FAIL")
        key = f"{kind}{order}"
        rep.profiles.append(
            {
                "kind": kind,
                "order": order,
                "rho": ladder.tolist(),
                "value": vals.tolist(),
                "refinement_delta": deltas,
                "bounded": bounded,
                "stable": stable,
                "verdict": verdict,
            }
        )
        rep.verdicts[f"transverse.{key}"] = verdict
    return rep


def growth_spread(fits):
    """Relative spread ``(max M - min M) / mean |M|`` of fitted rates."""
    M = np.array([f.M for f in fits])
    return float((M.max() - M.min()) / max(np.mean(np.abs(M)), 1e-300))


def regularity_report(model, degeneracy, P_orders=(2, 3), times=(0.05, 0.1), kernel=None, k_max=6, r=0.2, registry=None, **kw):
    """Run the transverse profile and both growth fits; collect verdicts."""
    from .heat import parametrix

    registry = registry if registry is not None else EstimateRegistry()
    H = chain_constants(model, degeneracy, r)
    geom = FiberGeometry(model, np.array([1.0]))
    if kernel is None:
        kernel = volterra_sum(parametrix(geom, P_orders[0]), 0.1, 8)
    rep = transverse_smoothness(model, kernel, **kw)
    on, off = [], []
    for t in times:
        for N in P_orders:
            P = parametrix(geom, N)
            on.append(on_diagonal_growth(model, P, t, k_max, r, H, registry=registry))
            off.append(off_diagonal_growth(model, degeneracy, P, t, k_max, r, H, registry=registry))
    for f in on + off:
        rep.fits[f.name] = f
    spread = growth_spread(on)
    rep.meta.update({"H": H, "r": r, "on_diagonal_spread": spread})
    rep.verdicts["on_diagonal.violations"] = "PASS" if sum(f.violations for f in on) == 0 else "FAIL"
    rep.verdicts["off_diagonal.violations"] = "PASS" if sum(f.violations for f in off) == 0 else "FAIL"
    rep.verdicts["on_diagonal.rate_spread"] = "PASS" if spread < 0.15 else "FAIL"
    return rep
