"""Command line runner.

    groupoid-heat run {model-check,flows,atlas,heat,verify,all} [--config PATH]
        [--out DIR] [--workers N] [--seed U64] [--log-level {info,debug}]

Exit status: 0 when every verdict passes, 1 on any failed verdict, 2 on
configuration or IO errors.
"""
from __future__ import annotations

import argparse
import datetime
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig
from .io import canonical_json, sha256_bytes, to_jsonable
from .pipelines import STAGES, make_model, run_stages

log = logging.getLogger("groupoid_heat")


def build_parser():
    p = argparse.ArgumentParser(prog="groupoid-heat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a pipeline stage")
    r.add_argument("stage", choices=STAGES + ("all",))
    r.add_argument("--config", type=Path, help="INI config file (defaults when omitted)")
    r.add_argument("--out", type=Path, default=Path("results"), help="artifact directory")
    r.add_argument("--workers", type=int, help="worker threads")
    r.add_argument("--seed", type=lambda s: int(s, 0), help="random seed (64-bit)")
    r.add_argument("--log-level", choices=("info", "debug"))
    sub.add_parser("show-config", help="print the default config")
    return p


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.workers is not None:
        over["workers"] = args.workers
    if args.seed is not None:
        over["seed"] = args.seed
    if args.log_level is not None:
        over["log_level"] = args.log_level
    return cfg.replace(run=over) if over else cfg


def _write(path: Path, data):
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return sha256_bytes(data)


def run(args) -> int:
    try:
        cfg = _load_config(args)
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.DEBUG if cfg.get("run", "log_level") == "debug" else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    names = list(STAGES) if args.stage == "all" else [args.stage]
    try:
        results = run_stages(cfg, names)
    except (ValueError, NotImplementedError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    chash = cfg.config_hash()
    try:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        artifacts = {"config.ini": _write(out / "config.ini", cfg.to_ini())}
        verdicts = {}
        for res in results:
            body = {"stage": res.name, "config_hash": chash, "report": to_jsonable(res.report)}
            body["verdicts"] = {k: ("PASS" if v else "FAIL") for k, v in sorted(res.verdicts.items())}
            if res.skipped:
                body["skipped"] = res.skipped
            fname = f"{res.name}.json"
            artifacts[fname] = _write(out / fname, canonical_json(body))
            for name, data in sorted(res.artifacts.items()):
                artifacts[name] = _write(out / name, data)
            verdicts.update({f"{res.name}.{k}": v for k, v in res.verdicts.items()})
        ok = all(verdicts.values())
        summary = {
            "config_hash": chash,
            "stages": names,
            "verdicts": {k: ("PASS" if v else "FAIL") for k, v in sorted(verdicts.items())},
            "status": "PASS" if ok else "FAIL",
        }
        artifacts["summary.json"] = _write(out / "summary.json", canonical_json(summary))
        manifest = {
            "config_hash": chash,
            "model": cfg.get("run", "model"),
            "model_hash": make_model(cfg).model_hash(),
            "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "versions": {
                "groupoid_heat": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "artifacts": {k: {"sha256": v, "config_hash": chash} for k, v in sorted(artifacts.items())},
        }
        (out / "manifest.json").write_text(canonical_json(manifest))
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return 2
    for k, v in sorted(verdicts.items()):
        if not v:
            print(f"FAIL {k}", file=sys.stderr)
    return 0 if ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "show-config":
        sys.stdout.write(ExperimentConfig().to_ini())
        return 0
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
