"""Smooth C-infinity step used for every cutoff in the package.

``smooth_step(r, radius)`` equals 1 for ``r <= radius/2`` and 0 for
``r >= radius``.  In between it is the logistic of
``1/(1-x) - 1/x`` with ``x = 2r/radius - 1``, which is flat to all orders
at both ends.
"""
import numpy as np


def smooth_step(r, radius, derivatives=0):
    """Evaluate the step and optionally its first two derivatives in ``r``.

    Returns a single array when ``derivatives == 0``, otherwise a tuple
    ``(value, d/dr, d2/dr2)`` truncated to the requested order.
    """
    if radius <= 0:
        raise ValueError("cutoff radius must be positive")
    r = np.asarray(r, dtype=float)
    x = 2.0 * r / radius - 1.0
    val = np.where(x <= 0.0, 1.0, 0.0)
    d1 = np.zeros_like(x)
    d2 = np.zeros_like(x)
    inside = (x > 0.0) & (x < 1.0)
    if np.any(inside):
        xi = x[inside]
        g = 1.0 / (1.0 - xi) - 1.0 / xi
        gp = 1.0 / xi**2 + 1.0 / (1.0 - xi) ** 2
        gpp = -2.0 / xi**3 + 2.0 / (1.0 - xi) ** 3
        s = 0.5 * (1.0 - np.tanh(0.5 * g))
        sp = -s * (1.0 - s) * gp
        spp = -sp * (1.0 - 2.0 * s) * gp - s * (1.0 - s) * gpp
        scale = 2.0 / radius
        val[inside] = s
        d1[inside] = sp * scale
        d2[inside] = spp * scale**2
    if derivatives == 0:
        return val
    return (val, d1, d2)[: derivatives + 1]
