"""
Running the whole pipeline from a config
========================================

The same stages are available as ``groupoid-heat run <stage>``.
"""
import json
import tempfile
from pathlib import Path

from groupoid_heat.cli import main

light = """[atlas]
chain_k = 4
chain_batch = 4
[heat]
times = 0.1
[regularity]
orders = 2
times = 0.05
k_max = 3
levels = 12
"""
with tempfile.TemporaryDirectory() as tmp:
    cfg = Path(tmp) / "light.ini"
    cfg.write_text(light)
    code = main(["run", "all", "--config", str(cfg), "--out", str(Path(tmp) / "out")])
    summary = json.loads((Path(tmp) / "out" / "summary.json").read_text())
    print("exit code", code, "status", summary["status"])
    for k, v in summary["verdicts"].items():
        print(f"  {k:45s} {v}")
