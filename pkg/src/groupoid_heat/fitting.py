"""Fitting of exponential and power-law bounds with exact re-verification.

Every bound is fitted by least squares in log space and its constant is then
inflated by the largest positive residual, so the fitted inequality holds at
every sample it was fitted on.
"""
from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EstimateFit:
    """A fitted bound ``value <= scale * C * exp(M * arg)`` (form ``"exp"``) or
    ``value <= scale * C * arg**M`` (form ``"power"``)."""

    name: str
    form: str
    C: float
    M: float
    n_samples: int
    max_residual: float
    violations: int
    slack: float = 0.0
    meta: dict = field(default_factory=dict)

    def bound(self, arg, scale=1.0):
        arg = np.asarray(arg, float)
        if self.form == "exp":
            return scale * self.C * np.exp(self.M * arg)
        return scale * self.C * arg**self.M

    def to_dict(self):
        return {
            "name": self.name,
            "form": self.form,
            "C": self.C,
            "M": self.M,
            "n_samples": self.n_samples,
            "max_residual": self.max_residual,
            "violations": self.violations,
            "slack": self.slack,
            "meta": self.meta,
        }


def _fit(name, form, arg, values, scale, fixed_M, floor):
    arg = np.asarray(arg, float).ravel()
    values = np.asarray(values, float).ravel()
    scale = np.broadcast_to(np.asarray(scale, float), values.shape).ravel()
    if values.shape != arg.shape:
        raise ValueError("arg and values must have the same shape")
    if np.any(~np.isfinite(values)):
        raise ValueError(f"non-finite samples in fit {name!r}")
    xs = arg if form == "exp" else np.log(arg)
    pos = (values > floor) & (scale > 0)
    if not np.any(pos):
        return EstimateFit(name, form, 0.0, 0.0 if fixed_M is None else fixed_M, len(values), 0.0, 0)
    logv = np.log(values[pos] / scale[pos])
    if fixed_M is not None:
        M = float(fixed_M)
        logC = float(np.mean(logv - M * xs[pos]))
    elif np.ptp(xs[pos]) == 0:
        M, logC = 0.0, float(np.mean(logv))
    else:
        M, logC = np.polyfit(xs[pos], logv, 1)
        M, logC = float(M), float(logC)
    res = logv - (logC + M * xs[pos])
    shift = float(np.max(res))
    C = float(np.exp(logC + shift) * (1 + 1e-12))
    fit = EstimateFit(name, form, C, M, len(values), float(np.max(np.abs(res))), 0)
    bound = fit.bound(arg, scale)
    fit.violations = int(np.sum(values > bound))
    with np.errstate(divide="ignore", invalid="ignore"):
        fit.slack = float(np.nanmin(np.where(values > 0, bound / values, np.inf)))
    return fit


def fit_exponential(name, arg, values, scale=1.0, fixed_M=None, floor=0.0):
    """Fit ``values <= scale * C * exp(M * arg)``.

    Samples with ``values <= floor`` do not influence the fit but are still
    re-checked.
    """
    return _fit(name, "exp", arg, values, scale, fixed_M, floor)


def fit_power(name, arg, values, scale=1.0, fixed_M=None, floor=0.0):
    """Fit ``values <= scale * C * arg**M`` (``arg > 0``)."""
    return _fit(name, "power", arg, values, scale, fixed_M, floor)


class EstimateRegistry:
    """Append-only, thread-safe store of fitted bounds keyed by name."""

    def __init__(self):
        self._fits = {}
        self._lock = threading.Lock()

    def publish(self, fit: EstimateFit):
        with self._lock:
            if fit.name in self._fits:
                raise KeyError(f"estimate {fit.name!r} already published")
            self._fits[fit.name] = fit
        return fit

    def __getitem__(self, name):
        return self._fits[name]

    def __contains__(self, name):
        return name in self._fits

    def names(self):
        return sorted(self._fits)

    def total_violations(self):
        return sum(f.violations for f in self._fits.values())

    def to_dict(self):
        return {k: self._fits[k].to_dict() for k in sorted(self._fits)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)
