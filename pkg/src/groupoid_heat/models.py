"""Built-in boundary groupoids, their algebroid data and degeneracy classification.

Three explicit realizations are provided:

``parabolic-circle``
    The action groupoid of R acting on the circle by the flow of
    ``(1 - cos theta) d/dtheta``.  The singular stratum is ``theta = 0``.
``stereo-sphere``
    The action groupoid of R^2 acting on S^2 by the plane translations seen
    through stereographic projection from the north pole N.  The singular
    stratum is ``{N}``.
``cylinder-product``
    The product of the pair groupoid of S^1 with ``stereo-sphere``; the
    singular stratum is ``S^1 x {N}``.

Base points are stored as *states*: the angle for the circle, the ambient
point of R^3 for the sphere, and ``(theta, X, Y, Z)`` for the product.  An
arrow is a :class:`GroupoidPoint` holding its source, its target and the
group component ``g`` in R^q.  The pair part of the product is carried by
the target angle itself.

Algebroid frames are always ordered ``(Y_1..Y_q, X_1..X_p)``: first the
isotropy generators, then the directions tangent to the singular stratum.
The fiber metric is ``h(x) * identity`` on the generators Y and the
identity on X, so the orthonormal frame is ``Y_i / sqrt(h)``, ``X_j``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cutoff import smooth_step

MODEL_NAMES = ("parabolic-circle", "stereo-sphere", "cylinder-product")

#: Default seed for every random sample drawn by the package.
DEFAULT_SEED = 0xB0DA_2F5E_ED00_0001


def wrap_angle(theta):
    """Map angles to (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    out = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.where(out == -np.pi, np.pi, out)


@dataclass(frozen=True)
class GroupoidPoint:
    """A batch of arrows ``source -> target`` with group component ``g``."""

    source: np.ndarray
    target: np.ndarray
    g: np.ndarray

    def __len__(self):
        return self.source.shape[0]

    def __getitem__(self, idx):
        return GroupoidPoint(
            np.atleast_2d(self.source[idx]),
            np.atleast_2d(self.target[idx]),
            np.atleast_2d(self.g[idx]),
        )


@dataclass(frozen=True)
class CoordinatePatch:
    name: str
    to_state: Callable[[np.ndarray], np.ndarray]
    from_state: Callable[[np.ndarray], np.ndarray]
    contains: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BaseManifold:
    """The compact base M with its atlas and Riemannian metric.

    The metric in every patch is the pull-back of the Euclidean metric on
    the state space (which is an isometric embedding for the built-ins).
    """

    dim: int
    state_dim: int
    patches: tuple
    tangent: Callable[[str, np.ndarray], np.ndarray]

    def metric(self, patch, coords):
        J = self.tangent(patch, coords)
        return np.einsum("...si,...sj->...ij", J, J)

    def volume_density(self, patch, coords):
        return np.sqrt(np.linalg.det(self.metric(patch, coords)))


@dataclass(frozen=True)
class AlgebroidSpec:
    """Rank, section names and metric data of the Lie algebroid."""

    p: int
    q: int
    section_names: tuple
    kernel_sections: tuple  # indices spanning the anchor kernel over the singular stratum

    @property
    def n(self):
        return self.p + self.q


class GroupoidModel:
    """Common interface of the built-in realizations.

    Subclasses provide the anchor, the conformal factor of the fiber
    metric, the distance to the singular stratum and the closed-form
    action.  Everything else (units, products, inverses, the defining
    function) is shared.
    """

    name: str = ""
    state_dim: int = 0
    pair_index: tuple = ()

    def __init__(self, h_amp, collar, anchor_scale=1.0):
        if collar <= 0:
            raise ValueError("collar radius must be positive")
        self.h_amp = float(h_amp)
        self.collar = float(collar)
        self.anchor_scale = float(anchor_scale)
        self.base = self._make_base()
        self.algebroid = self._make_algebroid()
        self._check_metric()

    # ------------------------------------------------------------------
    # subclass hooks
    def _make_base(self) -> BaseManifold:
        raise NotImplementedError

    def _make_algebroid(self) -> AlgebroidSpec:
        raise NotImplementedError

    def anchor(self, y):
        """Anchor of the generator frame: array ``(..., n, state_dim)``."""
        raise NotImplementedError

    def anchor_jacobian(self, y):
        """``d anchor / d state``: array ``(..., n, state_dim, state_dim)``."""
        raise NotImplementedError

    def h(self, y):
        raise NotImplementedError

    def grad_h(self, y):
        raise NotImplementedError

    def distance_to_singular(self, y):
        raise NotImplementedError

    def grad_distance(self, y):
        raise NotImplementedError

    def act(self, y, g):
        """Target of the arrow with source ``y`` and group component ``g``.

        For the product model only the sphere part is moved; the pair part
        of the target must be supplied separately.
        """
        raise NotImplementedError

    def project(self, y):
        """Return states to their canonical representatives."""
        return np.asarray(y, dtype=float)

    def to_state(self, coords):
        """Collar coordinates (chart near the singular stratum) to states."""
        raise NotImplementedError

    def from_state(self, y):
        raise NotImplementedError

    def tangent_basis(self, coords):
        """``d state / d coords`` in the collar chart: ``(..., state_dim, dim)``."""
        raise NotImplementedError

    def random_states(self, rng, size):
        raise NotImplementedError

    def collar_states(self, rho, n_dirs=4, rng=None):
        """States at prescribed distances ``rho`` from the singular stratum."""
        raise NotImplementedError

    # ------------------------------------------------------------------
    @property
    def p(self):
        return self.algebroid.p

    @property
    def q(self):
        return self.algebroid.q

    @property
    def n(self):
        return self.algebroid.n

    @property
    def dim(self):
        return self.base.dim

    @property
    def params(self):
        return {"h_amp": self.h_amp, "collar": self.collar, "anchor_scale": self.anchor_scale}

    def model_hash(self):
        import hashlib

        blob = json.dumps({"name": self.name, **self.params}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def _check_metric(self):
        rng = np.random.default_rng(12345)
        ys = self.random_states(rng, 2000)
        if np.min(self.h(ys)) <= 0:
            raise ValueError("metric override makes the fiber metric non-positive")

    def frame_scale(self, y):
        """Norms of the generator sections: ``sqrt(h)`` for Y, 1 for X."""
        y = np.asarray(y, dtype=float)
        sh = np.sqrt(self.h(y))
        out = np.ones(y.shape[:-1] + (self.n,))
        out[..., : self.q] = sh[..., None]
        return out

    def frame_scale_grad(self, y):
        y = np.asarray(y, dtype=float)
        hv = self.h(y)
        gh = self.grad_h(y)
        out = np.zeros(y.shape[:-1] + (self.n, self.state_dim))
        out[..., : self.q, :] = (0.5 * gh / np.sqrt(hv)[..., None])[..., None, :]
        return out

    def defining_function(self, y):
        """Smooth defining function of the singular stratum.

        Equal to the distance to the stratum within half the collar radius,
        identically 1 beyond the collar, blended by the module-wide step.
        """
        d = self.distance_to_singular(y)
        s = smooth_step(d, self.collar)
        return s * d + (1.0 - s)

    def grad_defining_function(self, y):
        d = self.distance_to_singular(y)
        s, sp = smooth_step(d, self.collar, derivatives=1)
        dd = self.grad_distance(y)
        return ((s + sp * d - sp))[..., None] * dd

    def on_singular(self, y, tol=1e-14):
        return self.distance_to_singular(y) <= tol

    # realization ------------------------------------------------------
    def unit(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        return GroupoidPoint(y.copy(), y.copy(), np.zeros((y.shape[0], self.q)))

    def inverse(self, a):
        return GroupoidPoint(a.target.copy(), a.source.copy(), -a.g)

    def multiply(self, a, b, tol=1e-8):
        """Product ``a b``; requires ``s(a) = t(b)``."""
        gap = self.state_distance(a.source, b.target)
        if np.any(gap > tol):
            raise ValueError(f"arrows are not composable (gap {np.max(gap):.2e})")
        return GroupoidPoint(b.source.copy(), a.target.copy(), a.g + b.g)

    def state_distance(self, y1, y2):
        d = np.asarray(y1, dtype=float) - np.asarray(y2, dtype=float)
        for i in self.angle_index:
            d[..., i] = wrap_angle(d[..., i])
        return np.max(np.abs(d), axis=-1)

    def arrow_distance(self, a, b):
        return np.maximum.reduce(
            [
                self.state_distance(a.source, b.source),
                self.state_distance(a.target, b.target),
                np.max(np.abs(a.g - b.g), axis=-1) if self.q else np.zeros(len(a)),
            ]
        )

    def realization_defect(self, a):
        """How far the target of ``a`` is from the closed-form action."""
        expected = self.act(a.source, a.g)
        for i in self.pair_index:
            expected[..., i] = a.target[..., i]
        return self.state_distance(expected, a.target)

    def fiber_coordinates(self, a):
        """Coordinates of ``a`` inside its source fiber: ``(g, pair part)``."""
        parts = [a.g]
        if self.pair_index:
            parts.append(a.target[..., list(self.pair_index)])
        return np.concatenate(parts, axis=-1)

    def tangent_to_frame(self, y, dy, dg):
        """Express a fiber tangent vector ``(dy, dg)`` at an arrow with target
        ``y`` in the orthonormal right-invariant frame."""
        gen = [dg]
        if self.pair_index:
            gen.append(dy[..., list(self.pair_index)])
        gen = np.concatenate(gen, axis=-1)
        return self.frame_scale(y) * gen

    angle_index: tuple = ()


# ----------------------------------------------------------------------
class ParabolicCircle(GroupoidModel):
    name = "parabolic-circle"
    state_dim = 1
    angle_index = (0,)

    def __init__(self, h_amp=0.3, collar=0.5, anchor_scale=1.0):
        super().__init__(h_amp, collar, anchor_scale)

    def _make_base(self):
        patches = (
            CoordinatePatch(
                "centered",
                lambda c: np.asarray(c, float),
                lambda y: wrap_angle(y),
                lambda y: np.abs(wrap_angle(y[..., 0])) < np.pi,
            ),
            CoordinatePatch(
                "antipodal",
                lambda c: np.asarray(c, float),
                lambda y: np.mod(y, 2 * np.pi),
                lambda y: np.abs(wrap_angle(y[..., 0])) > 0,
            ),
        )
        return BaseManifold(1, 1, patches, lambda patch, c: np.ones(np.shape(c)[:-1] + (1, 1)))

    def _make_algebroid(self):
        return AlgebroidSpec(p=0, q=1, section_names=("Y1",), kernel_sections=(0,))

    def anchor(self, y):
        th = np.asarray(y, float)[..., 0]
        return (self.anchor_scale * (1.0 - np.cos(th)))[..., None, None]

    def anchor_jacobian(self, y):
        th = np.asarray(y, float)[..., 0]
        return (self.anchor_scale * np.sin(th))[..., None, None, None]

    def h(self, y):
        return 1.0 + self.h_amp * np.sin(np.asarray(y, float)[..., 0])

    def grad_h(self, y):
        return (self.h_amp * np.cos(np.asarray(y, float)[..., 0]))[..., None]

    def distance_to_singular(self, y):
        return np.abs(wrap_angle(np.asarray(y, float)[..., 0]))

    def grad_distance(self, y):
        return np.sign(wrap_angle(np.asarray(y, float)[..., 0]))[..., None]

    def act(self, y, g):
        y = np.asarray(y, float)
        g = np.asarray(g, float)
        half = 0.5 * y[..., 0]
        s, c = np.sin(half), np.cos(half)
        # cot(theta/2) decreases at unit rate (times the anchor scale) along the flow
        out = 2.0 * np.arctan2(s, c - self.anchor_scale * g[..., 0] * s)
        return wrap_angle(out)[..., None]

    def project(self, y):
        return wrap_angle(y)

    def to_state(self, coords):
        return np.asarray(coords, float)

    def from_state(self, y):
        return wrap_angle(y)

    def tangent_basis(self, coords):
        return np.ones(np.shape(coords)[:-1] + (1, 1))

    def random_states(self, rng, size):
        return rng.uniform(-np.pi, np.pi, size=(size, 1))

    def collar_states(self, rho, n_dirs=2, rng=None):
        rho = np.asarray(rho, float)
        signs = np.array([1.0, -1.0])[: max(1, min(n_dirs, 2))]
        return (rho[:, None] * signs[None, :]).reshape(-1, 1)


# ----------------------------------------------------------------------
def _sphere_fields(P):
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    omz = 1.0 - Z
    v1 = np.stack([0.5 * (omz**2 + Y**2 - X**2), -X * Y, X * omz], axis=-1)
    v2 = np.stack([-X * Y, 0.5 * (omz**2 + X**2 - Y**2), Y * omz], axis=-1)
    return np.stack([v1, v2], axis=-2)


def _sphere_field_jacobians(P):
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    omz = 1.0 - Z
    zero = np.zeros_like(X)
    j1 = np.stack(
        [
            np.stack([-X, Y, -omz], -1),
            np.stack([-Y, -X, zero], -1),
            np.stack([omz, zero, -X], -1),
        ],
        axis=-2,
    )
    j2 = np.stack(
        [
            np.stack([-Y, -X, zero], -1),
            np.stack([X, -Y, -omz], -1),
            np.stack([zero, omz, -Y], -1),
        ],
        axis=-2,
    )
    return np.stack([j1, j2], axis=-3)


def _sphere_translate(P, c):
    """Translate by the complex number ``c`` in the plane of the projection
    from the north pole."""
    P = np.asarray(P, float)
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    upper = Z >= 0
    out = np.empty_like(P)
    # near N use w = 1/conj(z), in which the translation reads w/(1 + conj(c) w)
    w = (X + 1j * Y) / (1.0 + Z)
    w2 = w / (1.0 + np.conj(c) * w)
    z = np.where(upper, 0.0, (X + 1j * Y) / np.where(upper, 1.0, 1.0 - Z))
    z2 = z + c
    wa = np.abs(w2) ** 2
    za = np.abs(z2) ** 2
    from_w = np.stack([2 * w2.real, 2 * w2.imag, 1.0 - wa], -1) / (1.0 + wa)[..., None]
    from_z = np.stack([2 * z2.real, 2 * z2.imag, za - 1.0], -1) / (1.0 + za)[..., None]
    out = np.where(upper[..., None], from_w, from_z)
    return out


def _sphere_from_w(w):
    w = np.asarray(w, float)
    r2 = np.sum(w**2, axis=-1)
    return np.concatenate([2 * w, (1.0 - r2)[..., None]], axis=-1) / (1.0 + r2)[..., None]


def _sphere_to_w(P):
    P = np.asarray(P, float)
    return P[..., :2] / (1.0 + P[..., 2:3])


def _sphere_w_tangent(w):
    w = np.asarray(w, float)
    w1, w2 = w[..., 0], w[..., 1]
    D = 1.0 + w1**2 + w2**2
    D2 = D**2
    c1 = np.stack([2 * (D - 2 * w1**2) / D2, -4 * w1 * w2 / D2, -4 * w1 / D2], -1)
    c2 = np.stack([-4 * w1 * w2 / D2, 2 * (D - 2 * w2**2) / D2, -4 * w2 / D2], -1)
    return np.stack([c1, c2], axis=-1)


def _sphere_distance(P):
    rxy = np.hypot(P[..., 0], P[..., 1])
    return np.arctan2(rxy, P[..., 2])


def _sphere_grad_distance(P):
    X, Y, Z = P[..., 0], P[..., 1], P[..., 2]
    rxy = np.hypot(X, Y)
    den = rxy**2 + Z**2
    safe = np.where(rxy > 0, rxy, 1.0)
    gx = np.where(rxy > 0, X * Z / (safe * den), 0.0)
    gy = np.where(rxy > 0, Y * Z / (safe * den), 0.0)
    gz = -rxy / den
    return np.stack([gx, gy, gz], -1)


def _random_sphere(rng, size):
    v = rng.normal(size=(size, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sphere_collar(rho, n_dirs, rng):
    rho = np.asarray(rho, float)
    if rng is None:
        phis = 2 * np.pi * (np.arange(n_dirs) + 0.25) / n_dirs
    else:
        phis = rng.uniform(0, 2 * np.pi, size=n_dirs)
    r = rho[:, None]
    ph = phis[None, :]
    P = np.stack(
        [np.sin(r) * np.cos(ph), np.sin(r) * np.sin(ph), np.cos(r) * np.ones_like(ph)], -1
    )
    return P.reshape(-1, 3)


class StereoSphere(GroupoidModel):
    name = "stereo-sphere"
    state_dim = 3

    def __init__(self, h_amp=0.2, collar=0.5, anchor_scale=1.0):
        super().__init__(h_amp, collar, anchor_scale)

    def _make_base(self):
        patches = (
            CoordinatePatch(
                "north-collar",
                _sphere_from_w,
                _sphere_to_w,
                lambda P: P[..., 2] > -1.0 + 1e-12,
            ),
            CoordinatePatch(
                "south-collar",
                lambda z: _sphere_from_w(np.asarray(z, float))[..., [0, 1, 2]] * np.array([1, 1, -1]),
                lambda P: P[..., :2] / (1.0 - P[..., 2:3]),
                lambda P: P[..., 2] < 1.0 - 1e-12,
            ),
        )

        def tangent(patch, c):
            J = _sphere_w_tangent(c)
            if patch == "south-collar":
                J = J * np.array([1, 1, -1])[:, None]
            return J

        return BaseManifold(2, 3, patches, tangent)

    def _make_algebroid(self):
        return AlgebroidSpec(p=0, q=2, section_names=("Y1", "Y2"), kernel_sections=(0, 1))

    def anchor(self, y):
        return self.anchor_scale * _sphere_fields(np.asarray(y, float))

    def anchor_jacobian(self, y):
        return self.anchor_scale * _sphere_field_jacobians(np.asarray(y, float))

    def h(self, y):
        return 1.0 + self.h_amp * np.asarray(y, float)[..., 0]

    def grad_h(self, y):
        y = np.asarray(y, float)
        out = np.zeros_like(y)
        out[..., 0] = self.h_amp
        return out

    def distance_to_singular(self, y):
        return _sphere_distance(np.asarray(y, float))

    def grad_distance(self, y):
        return _sphere_grad_distance(np.asarray(y, float))

    def act(self, y, g):
        g = np.asarray(g, float)
        c = self.anchor_scale * (g[..., 0] + 1j * g[..., 1])
        return _sphere_translate(y, c)

    def project(self, y):
        y = np.asarray(y, float)
        return y / np.linalg.norm(y, axis=-1, keepdims=True)

    def to_state(self, coords):
        return _sphere_from_w(coords)

    def from_state(self, y):
        return _sphere_to_w(y)

    def tangent_basis(self, coords):
        return _sphere_w_tangent(coords)

    def random_states(self, rng, size):
        return _random_sphere(rng, size)

    def collar_states(self, rho, n_dirs=4, rng=None):
        return _sphere_collar(rho, n_dirs, rng)


# ----------------------------------------------------------------------
class CylinderProduct(GroupoidModel):
    """Pair groupoid of S^1 times ``stereo-sphere``.

    The conformal factor couples the two factors off the singular stratum
    but is identically 1 on it.
    """

    name = "cylinder-product"
    state_dim = 4
    pair_index = (0,)
    angle_index = (0,)

    def __init__(self, h_amp=0.2, collar=0.5, anchor_scale=1.0):
        super().__init__(h_amp, collar, anchor_scale)

    def _make_base(self):
        def c2s(c):
            c = np.asarray(c, float)
            return np.concatenate([c[..., :1], _sphere_from_w(c[..., 1:])], -1)

        def s2c(y):
            y = np.asarray(y, float)
            return np.concatenate([wrap_angle(y[..., :1]), _sphere_to_w(y[..., 1:])], -1)

        patches = (CoordinatePatch("collar", c2s, s2c, lambda y: y[..., 3] > -1 + 1e-12),)
        return BaseManifold(3, 4, patches, lambda patch, c: self.tangent_basis(c))

    def _make_algebroid(self):
        return AlgebroidSpec(p=1, q=2, section_names=("Y1", "Y2", "X1"), kernel_sections=(0, 1))

    def anchor(self, y):
        y = np.asarray(y, float)
        out = np.zeros(y.shape[:-1] + (3, 4))
        out[..., :2, 1:] = self.anchor_scale * _sphere_fields(y[..., 1:])
        out[..., 2, 0] = 1.0
        return out

    def anchor_jacobian(self, y):
        y = np.asarray(y, float)
        out = np.zeros(y.shape[:-1] + (3, 4, 4))
        out[..., :2, 1:, 1:] = self.anchor_scale * _sphere_field_jacobians(y[..., 1:])
        return out

    def h(self, y):
        y = np.asarray(y, float)
        return 1.0 + self.h_amp * (y[..., 1] + 0.75 * np.sin(y[..., 0]) * (1.0 - y[..., 3]))

    def grad_h(self, y):
        y = np.asarray(y, float)
        out = np.zeros_like(y)
        out[..., 0] = self.h_amp * 0.75 * np.cos(y[..., 0]) * (1.0 - y[..., 3])
        out[..., 1] = self.h_amp
        out[..., 3] = -self.h_amp * 0.75 * np.sin(y[..., 0])
        return out

    def distance_to_singular(self, y):
        return _sphere_distance(np.asarray(y, float)[..., 1:])

    def grad_distance(self, y):
        y = np.asarray(y, float)
        out = np.zeros_like(y)
        out[..., 1:] = _sphere_grad_distance(y[..., 1:])
        return out

    def act(self, y, g):
        y = np.asarray(y, float)
        g = np.asarray(g, float)
        c = self.anchor_scale * (g[..., 0] + 1j * g[..., 1])
        return np.concatenate([y[..., :1], _sphere_translate(y[..., 1:], c)], -1)

    def project(self, y):
        y = np.asarray(y, float).copy()
        y[..., 1:] /= np.linalg.norm(y[..., 1:], axis=-1, keepdims=True)
        y[..., 0] = wrap_angle(y[..., 0])
        return y

    def to_state(self, coords):
        return self.base.patches[0].to_state(coords)

    def from_state(self, y):
        return self.base.patches[0].from_state(y)

    def tangent_basis(self, coords):
        coords = np.asarray(coords, float)
        out = np.zeros(coords.shape[:-1] + (4, 3))
        out[..., 0, 0] = 1.0
        out[..., 1:, 1:] = _sphere_w_tangent(coords[..., 1:])
        return out

    def random_states(self, rng, size):
        th = rng.uniform(-np.pi, np.pi, size=(size, 1))
        return np.concatenate([th, _random_sphere(rng, size)], -1)

    def collar_states(self, rho, n_dirs=4, rng=None):
        P = _sphere_collar(rho, n_dirs, rng)
        th = np.linspace(-np.pi, np.pi, 3, endpoint=False) + 0.1
        th_all = np.repeat(th, P.shape[0])
        return np.concatenate([th_all[:, None], np.tile(P, (len(th), 1))], -1)


_BUILDERS = {
    "parabolic-circle": ParabolicCircle,
    "stereo-sphere": StereoSphere,
    "cylinder-product": CylinderProduct,
}


def build_model(name, **params):
    """Instantiate one of the built-in boundary groupoids.

    Parameters
    ----------
    name : str
        One of :data:`MODEL_NAMES`.
    **params
        ``h_amp`` (amplitude of the conformal factor of the fiber metric),
        ``collar`` (radius of the collar on which the defining function is
        the distance) and ``anchor_scale``.
    """
    try:
        cls = _BUILDERS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}") from None
    unknown = set(params) - {"h_amp", "collar", "anchor_scale"}
    if unknown:
        raise ValueError(f"unknown model parameters: {sorted(unknown)}")
    return cls(**params)


def defining_function(model, x):
    """Defining function of the singular stratum at the state(s) ``x``."""
    return model.defining_function(np.asarray(x, float))


# ----------------------------------------------------------------------
@dataclass
class DegeneracyReport:
    classification: str
    omega: float
    lam: float
    omega_prime: float
    lam_prime: float
    omega_global: float
    rho_grid: list = field(default_factory=list)
    upper_residual: float = 0.0
    lower_residual: float = 0.0
    upper_violations: int = 0
    lower_violations: int = 0

    def to_dict(self):
        return {
            "classification": self.classification,
            "omega": self.omega,
            "lambda": self.lam,
            "omega_prime": self.omega_prime,
            "lambda_prime": self.lam_prime,
            "omega_global": self.omega_global,
            "rho_grid": [float(r) for r in self.rho_grid],
            "upper_residual": self.upper_residual,
            "lower_residual": self.lower_residual,
            "upper_violations": self.upper_violations,
            "lower_violations": self.lower_violations,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def anchor_bounds(model, y):
    """Pointwise ``sup |d rho(nu X)|`` and ``inf |nu X|`` over unit ``X``.

    Norms use the fiber metric on A and the base metric on TM.
    """
    y = np.asarray(y, float)
    nu = model.anchor(y) / model.frame_scale(y)[..., None]  # orthonormal frame
    drho = model.grad_defining_function(y)
    upper = np.linalg.norm(np.einsum("...ns,...s->...n", nu, drho), axis=-1)
    sv = np.linalg.svd(np.swapaxes(nu, -1, -2), compute_uv=False)
    lower = sv[..., -1]
    return upper, lower


def classify_degeneracy(
    model, rho_min=1e-4, per_decade=10, n_dirs=4, n_global=4000, seed=DEFAULT_SEED, tol=0.05
):
    """Fit the degeneracy exponents of the anchor near the singular stratum.

    The fits are least squares in log-log coordinates over the collar grid;
    the constants are then inflated (upper bound) or deflated (lower bound)
    by the extreme residual so that both inequalities hold at every grid
    point, and re-checked.
    """
    if per_decade < 10:
        raise ValueError("grid too coarse: need at least 10 points per decade of rho")
    rho_max = 0.5 * model.collar
    n_pts = int(np.ceil(per_decade * np.log10(rho_max / rho_min))) + 1
    rho = np.geomspace(rho_min, rho_max, n_pts)
    ys = model.collar_states(rho, n_dirs=n_dirs)
    rho_at = model.defining_function(ys)
    if np.any(rho_at <= 0):
        raise ValueError("defining function non-positive off the singular stratum")
    upper, lower = anchor_bounds(model, ys)

    rng = np.random.default_rng(seed)
    yg = model.random_states(rng, n_global)
    yg = yg[model.distance_to_singular(yg) > 1e-9]
    rg = model.defining_function(yg)
    if np.any(rg <= 0):
        raise ValueError("defining function non-positive off the singular stratum")
    ug, _ = anchor_bounds(model, yg)
    omega_global = float(max(np.max(ug / rg), np.max(upper / rho_at)))

    if not (np.all(lower > 0) and np.all(np.isfinite(lower))):
        return DegeneracyReport("neither", np.nan, np.nan, 0.0, np.nan, omega_global, list(rho))

    logr = np.log(rho_at)
    A = np.stack([np.ones_like(logr), logr], -1)
    lo_coef, *_ = np.linalg.lstsq(A, np.log(lower), rcond=None)
    lo_res = np.log(lower) - A @ lo_coef
    lam_p = float(lo_coef[1])
    omega_p = float(np.exp(lo_coef[0] + lo_res.min() - 1e-12))

    pos = upper > 0
    if np.any(pos):
        up_coef, *_ = np.linalg.lstsq(A[pos], np.log(upper[pos]), rcond=None)
        up_res = np.log(upper[pos]) - A[pos] @ up_coef
        lam = float(up_coef[1])
        omega = float(np.exp(up_coef[0] + up_res.max() + 1e-12))
        up_resid = float(np.max(np.abs(up_res)))
    else:
        lam, omega, up_resid = np.inf, 0.0, 0.0
    lo_resid = float(np.max(np.abs(lo_res)))
    if max(lo_resid, up_resid) > 2.0:
        raise ValueError("grid too coarse: log-log fit residual above threshold")

    up_viol = int(np.sum(upper > omega * rho_at**lam))
    lo_viol = int(np.sum(lower < omega_p * rho_at**lam_p))

    if lam_p <= 1.0 + tol:
        cls = "non-degenerate"
    elif lam >= 2.0 - tol and lam_p >= 2.0 - tol:
        cls = "uniformly-degenerate"
    else:
        cls = "neither"
    return DegeneracyReport(
        cls, omega, lam, omega_p, lam_p, omega_global, list(rho), up_resid, lo_resid, up_viol, lo_viol
    )
