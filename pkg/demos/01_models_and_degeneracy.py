"""
Built-in groupoids and how fast their anchors degenerate
========================================================

Each model realizes a boundary groupoid explicitly: arrows are
``(source, target, g)`` triples and the product adds group components.
"""
import numpy as np

from groupoid_heat import GroupoidPoint, build_model, classify_degeneracy
from groupoid_heat.flows import check_distance_estimate

# the parabolic circle: R acts on S^1 by the flow of (1 - cos theta) d/dtheta
model = build_model("parabolic-circle")
x = np.array([[0.8]])
a = GroupoidPoint(x, model.act(x, [[0.5]]), np.array([[0.5]]))
b = GroupoidPoint(a.target, model.act(a.target, [[1.0]]), np.array([[1.0]]))
print("b a has group component", model.multiply(b, a).g[0, 0])

# fit |d rho(nu X)| <= omega rho^lambda and |nu X| >= omega' rho^lambda'
for name in ("parabolic-circle", "stereo-sphere", "cylinder-product"):
    rep = classify_degeneracy(build_model(name))
    print(f"{name:18s} {rep.classification:22s} lambda={rep.lam:.3f} lambda'={rep.lam_prime:.3f}")

# the fitted global rate bounds how fast rho can change along a fiber
rep = classify_degeneracy(model)
viol, worst, _ = check_distance_estimate(model, rep.omega_global, pairs=200)
print(f"distance estimate: {viol} violations, worst ratio {worst:.3f}")
