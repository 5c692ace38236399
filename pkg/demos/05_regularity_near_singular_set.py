"""
Regularity of the heat kernel across the singular stratum
=========================================================

Transverse derivatives along a ladder rho = 2^-1 .. 2^-10, and the
growth in k of derivatives of the cut-off Volterra chains.
"""
import numpy as np

from groupoid_heat import build_model, classify_degeneracy
from groupoid_heat import heat, regularity

model = build_model("parabolic-circle")
deg = classify_degeneracy(model)
geom = heat.FiberGeometry(model, np.array([1.0]))
K = heat.volterra_sum(heat.parametrix(geom, 2), 0.1)

rep = regularity.transverse_smoothness(model, K)
for p in rep.profiles:
    print(f"{p['kind']}{p['order']}: max {max(p['value']):.3e} "
          f"median {np.median(p['value']):.3e} refinement {p['refinement_delta'][-1]:.1e} -> {p['verdict']}")

H = regularity.chain_constants(model, deg, 0.2)
P = heat.parametrix(geom, 2)
on = regularity.on_diagonal_growth(model, P, 0.05, k_max=4, H=H)
print(f"on-diagonal: rate {on.M:.3f} (log H = {np.log(H):.3f}), violations {on.violations}")
sb = regularity.support_bound_check(model, 0.2, H, deg.omega_global, 4)
print(f"complementary chains: rho(x) >= {sb['bound']:.2e}, {sb['violations']} violations")
