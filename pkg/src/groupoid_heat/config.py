"""Experiment configuration: INI sections with typed, validated keys.

Unknown sections or keys are errors.  Floats are written with ``repr`` so a
config survives a write/read cycle bit for bit.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field

from .models import DEFAULT_SEED, MODEL_NAMES


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(v) for v in str(s).replace(",", " ").split())


def _ints(s):
    return tuple(int(v) for v in str(s).replace(",", " ").split())


# (type, default, constraint)
SCHEMA = {
    "run": {
        "model": (str, "parabolic-circle", "model"),
        "seed": (int, DEFAULT_SEED, "u64"),
        "workers": (int, 1, "pos"),
        "log_level": (str, "info", "level"),
    },
    "model": {
        "h_amp": (float, None, "nonneg"),
        "collar": (float, None, "pos"),
        "anchor_scale": (float, None, "pos"),
    },
    "flows": {
        "samples": (int, 1000, "pos"),
        "rtol": (float, 1e-9, "pos"),
        "atol": (float, 1e-10, "pos"),
        "distance_pairs": (int, 200, "pos"),
    },
    "degeneracy": {
        "rho_min": (float, 1e-4, "pos"),
        "per_decade": (int, 10, "pos"),
        "n_dirs": (int, 4, "pos"),
        "n_global": (int, 4000, "pos"),
    },
    "atlas": {
        "tau_max": (float, 1.5, "pos"),
        "n_tau": (int, 7, "pos"),
        "injectivity_points": (int, 450, "pos"),
        "multiply_states": (int, 500, "pos"),
        "chain_k": (int, 12, "pos"),
        "chain_batch": (int, 20, "pos"),
    },
    "heat": {
        "order": (int, 2, "pos"),
        "cutoff": (float, 1.0, "pos"),
        "times": (_floats, (0.05, 0.1, 0.2), "pos"),
        "k_max": (int, 8, "pos"),
        "du": (float, 0.005, "pos"),
        "max_ds": (float, 1.25e-4, "pos"),
    },
    "regularity": {
        "orders": (_ints, (2, 3), "pos"),
        "times": (_floats, (0.05, 0.1), "pos"),
        "k_max": (int, 6, "pos"),
        "r": (float, 0.2, "pos"),
        "levels": (int, 24, "pos"),
        "kernel_t": (float, 0.1, "pos"),
        "derivative_orders": (_ints, (1, 2), "pos"),
    },
}


def _check(section, key, value, rule):
    vals = value if isinstance(value, tuple) else (value,)
    if rule == "model" and value not in MODEL_NAMES:
        raise ConfigError(f"[{section}] {key}: unknown model {value!r}")
    if rule == "level" and value not in ("info", "debug"):
        raise ConfigError(f"[{section}] {key}: must be info or debug")
    if rule == "u64" and not 0 <= value < 2**64:
        raise ConfigError(f"[{section}] {key}: seed must fit in 64 bits")
    if rule == "pos" and (not vals or any(not v > 0 for v in vals)):
        raise ConfigError(f"[{section}] {key}: must be positive")
    if rule == "nonneg" and any(not v >= 0 for v in vals):
        raise ConfigError(f"[{section}] {key}: must be non-negative")


def _coerce(typ, v):
    if typ is _floats:
        return tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else _floats(v)
    if typ is _ints:
        return tuple(_coerce(int, x) for x in v) if isinstance(v, (list, tuple)) else _ints(v)
    if typ is int:
        if isinstance(v, str):
            return int(v, 0)
        if isinstance(v, float) and not v.is_integer():
            raise ValueError(f"expected an integer, got {v!r}")
        return int(v)
    return typ(v)


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}
        for s, kv in self.values.items():
            if s not in SCHEMA:
                raise ConfigError(f"unknown section [{s}]")
            for k, v in kv.items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"unknown key {k!r} in [{s}]")
                full[s][k] = v
        for s, keys in SCHEMA.items():
            for k, (typ, _, rule) in keys.items():
                v = full[s][k]
                if v is None:
                    continue
                try:
                    v = _coerce(typ, v)
                except (TypeError, ValueError) as e:
                    raise ConfigError(f"[{s}] {k}: {e}") from None
                full[s][k] = v
                _check(s, k, v, rule)
        self.values = full

    def __getitem__(self, section):
        return self.values[section]

    def get(self, section, key):
        return self.values[section][key]

    @property
    def model_params(self):
        return {k: v for k, v in self.values["model"].items() if v is not None}

    def replace(self, **sections):
        """New config with some keys overridden: ``replace(run={"seed": 1})``."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for s, kv in sections.items():
            vals.setdefault(s, {}).update(kv)
        return ExperimentConfig(vals)

    def to_ini(self) -> str:
        lines = []
        for s in SCHEMA:
            lines.append(f"[{s}]")
            for k in SCHEMA[s]:
                v = self.values[s][k]
                if v is not None:
                    lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as e:
            raise ConfigError(str(e)) from None
        vals = {s: dict(cp[s]) for s in cp.sections()}
        for s, kv in vals.items():
            if s not in SCHEMA:
                raise ConfigError(f"unknown section [{s}]")
            for k, v in kv.items():
                if k not in SCHEMA[s]:
                    raise ConfigError(f"unknown key {k!r} in [{s}]")
        return cls(vals)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()
