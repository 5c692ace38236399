"""
The fiberwise heat kernel from a parametrix and its Volterra series
===================================================================

Fibers of the parabolic circle are lines; in arclength the heat kernel
is computed once and shared by every base point.
"""
import numpy as np

from groupoid_heat import build_model
from groupoid_heat import heat

x = np.array([1.0])

# flat metric: the series must reproduce the Gaussian
flat = build_model("parabolic-circle", h_amp=0.0)
P = heat.parametrix(heat.FiberGeometry(flat, x), 2)
for t in (0.05, 0.1, 0.2):
    print(f"flat t={t}: relative error vs Gaussian {heat.gaussian_match(heat.volterra_sum(P, t)):.1e}")

# h = 1 + 0.3 sin(theta)
model = build_model("parabolic-circle")
P = heat.parametrix(heat.FiberGeometry(model, x), 3)
K = heat.volterra_sum(P, 0.2)
print("sup |Q^(k)|:", " ".join(f"{s:.1e}" for s in K.sup_norms))
print("converged:", K.converged, " min value:", K.row().min())
r1, r2 = heat.heat_residual(model, x, K, 0.1), heat.heat_residual(model, x, K, 0.05)
print(f"heat residual {r1:.2e} -> {r2:.2e} under step halving (ratio {r1 / r2:.1f})")

# Q o f -> f as t -> 0
g = np.linspace(-1.5, 1.5, 31)
f = heat.bump(0.0, 3.0)
for t in (0.2, 0.1, 0.05):
    k = heat.volterra_sum(P, t)
    print(f"t={t}: sup |Q o f - f| = {heat.initial_condition_error(model, x, k, f, g):.2e}")
