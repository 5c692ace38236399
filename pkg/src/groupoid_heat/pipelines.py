"""Experiment stages driven by an :class:`ExperimentConfig`.

Each stage returns a :class:`StageResult` holding a JSON-ready report,
named boolean verdicts and extra artifacts (file name -> bytes or text).
Reports contain no timings so that identical configs give identical bytes.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import atlas, flows, heat, regularity
from .fitting import EstimateRegistry
from .io import kernel_csv, kernel_header, encode_grid, canonical_json, to_jsonable
from .models import build_model, classify_degeneracy

log = logging.getLogger("groupoid_heat")

STAGES = ("model-check", "flows", "atlas", "heat", "verify")


@dataclass
class StageResult:
    name: str
    report: dict
    verdicts: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    skipped: str = ""

    @property
    def passed(self):
        return all(self.verdicts.values())


def _pmap(fn, items, workers):
    """Ordered map; threads only (numpy and FFTs release the GIL)."""
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def make_model(cfg):
    return build_model(cfg.get("run", "model"), **cfg.model_params)


def stage_model_check(cfg, model=None):
    model = model or make_model(cfg)
    d = cfg["degeneracy"]
    rep = classify_degeneracy(
        model, rho_min=d["rho_min"], per_decade=d["per_decade"], n_dirs=d["n_dirs"], n_global=d["n_global"], seed=cfg.get("run", "seed")
    )
    out = {"model": model.name, "model_hash": model.model_hash(), "degeneracy": rep.to_dict()}
    verdicts = {"classified": rep.classification in ("uniformly-degenerate", "non-degenerate")}
    if model.p == 0:
        viol, worst, _ = flows.check_distance_estimate(
            model, rep.omega_global, pairs=cfg.get("flows", "distance_pairs"), seed=cfg.get("run", "seed")
        )
        out["distance_estimate"] = {"omega": rep.omega_global, "violations": viol, "worst_ratio": worst}
        verdicts["distance_estimate"] = viol == 0
    else:
        out["distance_estimate"] = "not evaluated: fiber distance needs fibers without a pair-groupoid part"
    return StageResult("model-check", out, verdicts), rep


def stage_flows(cfg, model=None):
    model = model or make_model(cfg)
    f = cfg["flows"]
    ids = flows.check_exp_identities(model, f["samples"], cfg.get("run", "seed"), rtol=f["rtol"], atol=f["atol"])
    out = {"model": model.name, "exp_identities": ids}
    verdicts = {
        "conjugation_identity": ids["conjugation_max_dev"] < 1e-8,
        "inverse_identity": ids["inverse_max_dev"] < 1e-8,
    }
    if model.name == "parabolic-circle" and model.anchor_scale == 1.0:
        th0 = np.array([np.pi / 4, np.pi / 2, np.pi, 3 * np.pi / 2])
        ts = np.linspace(-2, 2, 9)
        dev = 0.0
        for t in ts:
            r = flows.base_flow(model, th0[:, None], flows.unit_section(model, 0, "generator"), t, rtol=f["rtol"], atol=f["atol"])
            exact = 2 * np.arctan2(1.0, 1.0 / np.tan(th0 / 2) - t)
            d = np.abs(np.mod(r.endpoint[:, 0] - exact + np.pi, 2 * np.pi) - np.pi)
            dev = max(dev, float(d.max()))
        out["closed_form_max_dev"] = dev
        verdicts["closed_form"] = dev < 1e-8
    return StageResult("flows", out, verdicts)


def stage_atlas(cfg, model=None):
    model = model or make_model(cfg)
    a = cfg["atlas"]
    seed = cfg.get("run", "seed")
    reg = EstimateRegistry()
    charts = atlas.default_charts(model)
    certs = [
        atlas.certify_domain(ch, tau_max=a["tau_max"], n_tau=a["n_tau"], injectivity_points=a["injectivity_points"], seed=seed, registry=reg)
        for ch in charts
    ]
    out = {"model": model.name, "certificates": [c.to_dict() for c in certs]}
    verdicts = {
        "jacobian_certified": all(c.min_det_lower > 0 for c in certs),
        "identity_on_singular": all(c.singular_w_dev < 1e-9 for c in certs),
        "injective": all(c.collisions == 0 for c in certs),
    }
    rng = np.random.default_rng(seed)
    ch = charts[0]
    x, c = atlas.sample_domain(ch, rng, a["multiply_states"], tau_max=1.0)
    mult = {}
    for i in range(model.q):
        sec = np.zeros(model.n)
        sec[i] = 1.0
        sol = atlas.multiply_exp(ch, x, c, sec, t=0.5, n_out=5)
        inv, conv = ch.inverse(atlas.multiply_direct(ch, x, c, sec, t=0.5))
        cross = float(np.max(np.abs(inv - sol.coords[:, -1]))) if np.all(conv) else float("inf")
        est = atlas.multiplication_estimates(ch, x, c, sol, i, registry=reg)
        mult[f"Y{i + 1}"] = {"cross_check": cross, "vw_defect": sol.vw_defect, **est}
        verdicts[f"multiply.Y{i + 1}.cross_check"] = cross < 1e-7
        verdicts[f"multiply.Y{i + 1}.estimates"] = est["a_priori_violations"] == 0 and est["integrated_violations"] == 0
    out["multiplication"] = mult
    words = atlas.random_words(charts, rng, a["chain_k"], a["chain_batch"])
    rho0 = atlas.chain_start_radius(charts, a["chain_k"])
    x0 = model.collar_states(np.full(1, rho0), rng=rng)[: a["chain_batch"]]
    x0 = np.resize(x0, (a["chain_batch"], model.state_dim))
    res = atlas.chain_compose(charts, words, x0)
    fit = atlas.fit_chain_growth(res.V_norm, registry=reg)
    final = res.arrows[-1]
    base, ode = atlas.chain_ode(charts, words[:2], x0)
    two = float(np.max(model.arrow_distance(base.forward(x0, ode[-1]), res.arrows[1])))
    out["chain"] = {"start_rho": rho0, "growth": fit.to_dict(), "sup_V": res.V_norm.max(axis=1).tolist(), "two_step_ode_deviation": two}
    verdicts["chain.growth_fit"] = fit.violations == 0
    verdicts["chain.two_step_match"] = two < 1e-7 and bool(np.all(np.isfinite(final.g)))
    out["estimates"] = reg.to_dict()
    return StageResult("atlas", out, verdicts)


def _heat_one(model, h, t, config_hash):
    geom = heat.FiberGeometry(model, np.array([1.0]))
    P = heat.parametrix(geom, h["order"], h["cutoff"], du=h["du"])
    K = heat.volterra_sum(P, t, h["k_max"], du=h["du"], max_ds=h["max_ds"])
    rep = {"t": t, **K.to_dict(), "factorial_diagnostic": K.factorial_diagnostic()}
    verdicts = {}
    flat = model.h_amp == 0.0
    if flat:
        gm = heat.gaussian_match(K)
        rep["gaussian_match"] = gm
        verdicts[f"t={t:g}.gaussian_match"] = gm < 1e-6
    else:
        r1 = heat.heat_residual(model, geom.x, K, 0.1)
        r2 = heat.heat_residual(model, geom.x, K, 0.05)
        rep["residual"] = {"step_0.1": r1, "step_0.05": r2, "ratio": r1 / r2}
        verdicts[f"t={t:g}.residual_refinement"] = r1 / r2 >= 3.0
    rep["min_value"] = float(K.row().min())
    verdicts[f"t={t:g}.positive"] = rep["min_value"] > -1e-9
    verdicts[f"t={t:g}.converged"] = K.converged
    name = f"kernel_t{t:g}"
    header = kernel_header(K, model.model_hash(), config_hash)
    arts = {
        f"{name}.bin": encode_grid(K.row(), header),
        f"{name}.json": canonical_json(to_jsonable({**header, **K.to_dict()})),
        f"{name}.csv": kernel_csv(K),
    }
    return rep, verdicts, arts


def stage_heat(cfg, model=None):
    model = model or make_model(cfg)
    h = cfg["heat"]
    try:
        heat.FiberGeometry(model, np.zeros(model.state_dim))
    except NotImplementedError as e:
        return StageResult("heat", {"model": model.name, "skipped": str(e)}, {}, skipped=str(e))
    chash = cfg.config_hash()
    runs = _pmap(lambda t: _heat_one(model, h, t, chash), list(h["times"]), cfg.get("run", "workers"))
    out = {"model": model.name, "runs": [r[0] for r in runs]}
    verdicts, arts = {}, {}
    for _, v, a in runs:
        verdicts.update(v)
        arts.update(a)
    if model.h_amp == 0.0:
        g = np.linspace(-2, 2, 21)
        x = np.array([1.0])
        conv = heat.convolve(model, x, heat.gaussian_kernel(model, 0.1), heat.gaussian_kernel(model, 0.15), g)
        exact = heat.ParametrixKernel.gaussian(heat.arclength(model, x, g), 0.25)
        sg = float(np.max(np.abs(conv - exact)) / np.max(exact))
        out["semigroup_rel_error"] = sg
        verdicts["semigroup"] = sg < 1e-8
    return StageResult("heat", out, verdicts, arts)


def stage_verify(cfg, model=None, degeneracy=None):
    model = model or make_model(cfg)
    if model.q != 1 or model.p != 0:
        msg = f"regularity checks need one-dimensional fibers (model {model.name!r})"
        return StageResult("verify", {"model": model.name, "skipped": msg}, {}, skipped=msg)
    if degeneracy is None:
        _, degeneracy = stage_model_check(cfg, model)
    rg, h = cfg["regularity"], cfg["heat"]
    geom = heat.FiberGeometry(model, np.array([1.0]))
    K = heat.volterra_sum(heat.parametrix(geom, h["order"], h["cutoff"]), rg["kernel_t"], h["k_max"], du=h["du"], max_ds=h["max_ds"])
    H = regularity.chain_constants(model, degeneracy, rg["r"])
    rep = regularity.transverse_smoothness(model, K, orders=rg["derivative_orders"])
    reg = EstimateRegistry()
    jobs = [(t, N) for t in rg["times"] for N in rg["orders"]]

    def one(job):
        t, N = job
        P = heat.parametrix(geom, N, h["cutoff"])
        on = regularity.on_diagonal_growth(model, P, t, rg["k_max"], rg["r"], H, n_levels=rg["levels"])
        off = regularity.off_diagonal_growth(model, degeneracy, P, t, rg["k_max"], rg["r"], H, n_levels=rg["levels"])
        return on, off

    fits = _pmap(one, jobs, cfg.get("run", "workers"))
    for on, off in fits:
        reg.publish(on)
        reg.publish(off)
        rep.fits[on.name] = on
        rep.fits[off.name] = off
    spread = regularity.growth_spread([f[0] for f in fits])
    sb = regularity.support_bound_check(model, rg["r"], H, degeneracy.omega_global, rg["k_max"], seed=cfg.get("run", "seed"))
    pf = regularity.pushforward_identity_check(model, seed=cfg.get("run", "seed"))
    rep.meta.update({"H": H, "r": rg["r"], "on_diagonal_rate_spread": spread, "support_bound": sb, "pushforward": pf})
    verdicts = {k: v == "PASS" for k, v in rep.verdicts.items()}
    verdicts["growth_fits"] = reg.total_violations() == 0
    verdicts["on_diagonal_rate_spread"] = spread < 0.15
    verdicts["support_bound"] = sb["violations"] == 0
    verdicts["pushforward_identities"] = max(pf["target"], pf["source"]) < 1e-5
    arts = {"regularity_profiles.csv": rep.to_csv()}
    return StageResult("verify", to_jsonable(rep.to_dict()), verdicts, arts)


def run_stages(cfg, names):
    """Run stages in order, sharing the model and the degeneracy report."""
    model = make_model(cfg)
    results, deg = [], None
    for name in names:
        log.info("stage %s", name)
        if name == "model-check":
            res, deg = stage_model_check(cfg, model)
        elif name == "flows":
            res = stage_flows(cfg, model)
        elif name == "atlas":
            res = stage_atlas(cfg, model)
        elif name == "heat":
            res = stage_heat(cfg, model)
        elif name == "verify":
            res = stage_verify(cfg, model, deg)
        else:
            raise ValueError(f"unknown stage {name!r}")
        for k, v in res.verdicts.items():
            log.info("  %-40s %s", k, "PASS" if v else "FAIL")
        results.append(res)
    return results
