import json

import pytest
from hypothesis import given, strategies as st

from groupoid_heat.cli import main
from groupoid_heat.config import ConfigError, ExperimentConfig
from groupoid_heat.io import sha256_bytes

finite = st.floats(1e-12, 1e6, allow_nan=False, allow_infinity=False)


@given(finite, finite, st.integers(0, 2**64 - 1), st.lists(finite, min_size=1, max_size=4))
def test_ini_roundtrip_bit_exact(du, r, seed, times):
    cfg = ExperimentConfig({"run": {"seed": seed}, "heat": {"du": du, "times": times}, "regularity": {"r": r}})
    back = ExperimentConfig.from_ini(cfg.to_ini())
    assert back.values == cfg.values
    assert back.config_hash() == cfg.config_hash()


def test_defaults_and_model_params():
    cfg = ExperimentConfig()
    assert cfg.get("heat", "times") == (0.05, 0.1, 0.2)
    assert cfg.model_params == {}
    assert cfg.replace(model={"h_amp": 0.0}).model_params == {"h_amp": 0.0}


@pytest.mark.parametrize(
    "text",
    [
        "[nonsense]\na = 1\n",
        "[heat]\nspeed = 3\n",
        "[heat]\nk_max = 0\n",
        "[heat]\nk_max = 2.5\n",
        "[run]\nmodel = torus\n",
        "[run]\nseed = -1\n",
        "[model]\nh_amp = -0.1\n",
        "not an ini file",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini(text)


def test_hash_changes_with_values():
    a = ExperimentConfig()
    assert a.config_hash() != a.replace(run={"seed": 1}).config_hash()


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_show_config(capsys):
    assert main(["show-config"]) == 0
    assert ExperimentConfig.from_ini(capsys.readouterr().out).values == ExperimentConfig().values


def test_exit_code_config_error(tmp_path):
    cfg = _write(tmp_path, "[heat]\nk_max = 0\n")
    assert main(["run", "heat", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "heat", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path / "o")]) == 2


def test_exit_code_failed_verdict(tmp_path):
    # a loose integrator cannot reach the 1e-8 identity tolerance
    cfg = _write(tmp_path, "[flows]\nsamples = 20\nrtol = 1e-3\natol = 1e-3\n")
    out = tmp_path / "o"
    assert main(["run", "flows", "--config", str(cfg), "--out", str(out)]) == 1
    summary = json.loads((out / "summary.json").read_text())
    assert summary["status"] == "FAIL"


def test_run_writes_complete_manifest(tmp_path):
    cfg = _write(tmp_path, "[degeneracy]\nn_global = 500\n[flows]\nsamples = 50\ndistance_pairs = 50\n")
    out = tmp_path / "o"
    assert main(["run", "model-check", "--config", str(cfg), "--out", str(out), "--seed", "0x10"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    files = {p.name for p in out.iterdir()} - {"manifest.json"}
    assert set(man["artifacts"]) == files
    for name, entry in man["artifacts"].items():
        assert entry["sha256"] == sha256_bytes((out / name).read_bytes())
        assert entry["config_hash"] == man["config_hash"]
    assert {"groupoid_heat", "numpy", "scipy", "python"} <= set(man["versions"])
    loaded = ExperimentConfig.load(out / "config.ini")
    assert loaded.get("run", "seed") == 16 and loaded.config_hash() == man["config_hash"]
    stage = json.loads((out / "model-check.json").read_text())
    assert stage["verdicts"]["classified"] == "PASS"


def test_heat_stage_skipped_for_planar_fibers(tmp_path):
    cfg = _write(tmp_path, "[run]\nmodel = stereo-sphere\n")
    out = tmp_path / "o"
    assert main(["run", "heat", "--config", str(cfg), "--out", str(out)]) == 0
    assert "skipped" in json.loads((out / "heat.json").read_text())


def test_flat_heat_stage_artifacts(tmp_path):
    cfg = _write(tmp_path, "[model]\nh_amp = 0.0\n[heat]\ntimes = 0.1\n")
    out = tmp_path / "o"
    assert main(["run", "heat", "--config", str(cfg), "--out", str(out)]) == 0
    rep = json.loads((out / "heat.json").read_text())
    assert rep["verdicts"]["t=0.1.gaussian_match"] == "PASS"
    assert rep["verdicts"]["semigroup"] == "PASS"
    assert (out / "kernel_t0.1.bin").read_bytes()[:4] == b"GHKG"


def test_stage_reports_deterministic(tmp_path):
    cfg = _write(tmp_path, "[flows]\nsamples = 30\n")
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["run", "flows", "--config", str(cfg), "--out", str(o)]) == 0
    for name in ("flows.json", "summary.json", "config.ini"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
