import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ezinvest.cli import main
from ezinvest.config import ConfigError, RunConfig
from ezinvest.solver import riccati_value
from ezinvest import ConstantParams, EZPreferences, make_model

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"

HESTON = {
    "preferences": {"gamma": 5.0, "psi": 1.5, "delta": 0.08},
    "model": {"kind": "heston", "r0": 0.05, "r1": 0.0, "lam": 0.47, "sigma": 1.0,
              "b": 5.0, "ell": 0.0225, "a": 0.25, "rho": -0.5},
    "T": 1.0,
    "x0": 0.04,
    "solver": {"n_x": 80, "steps_per_unit": 50},
    "simulation": {"paths": 400, "dt": 0.01, "seed": 7, "chunk": 200,
                   "perturbations": [{"name": "pi+0.2", "pi_shift": 0.2}]},
    "horizon": {"psi": [0.2, 1.5], "delta": [0.08], "T_max": 4.0, "dT": 1.0},
}


def write(tmp_path, cfg, name="run.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.mark.parametrize("name", ["heston_reference.json", "kim_omberg_reference.json"])
def test_check_reference_configs(name, capsys):
    assert main(["check", "--config", str(CONFIGS / name)]) == 0
    assert "overall: PASS" in capsys.readouterr().out


def test_check_feller_failure(tmp_path):
    cfg = json.loads(json.dumps(HESTON))
    cfg["model"]["a"] = 0.5
    assert main(["check", "--config", write(tmp_path, cfg)]) == 1


def test_check_writes_json(tmp_path):
    assert main(["check", "--config", write(tmp_path, HESTON), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "check.json").read_text())["passed"] is True


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{ not json")
    assert main(["check", "--config", str(p)]) == 2


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: c.update(extra=1),
        lambda c: c["model"].update(kind="garch"),
        lambda c: c["model"].update(volvol=1.0),
        lambda c: c["preferences"].update(gamma=0.5),
        lambda c: c.update(T=-1),
        lambda c: c["solver"].update(n_x=2),
        lambda c: c["simulation"].update(seed=-3),
        lambda c: c.pop("model"),
    ],
)
def test_config_errors(tmp_path, mutate):
    cfg = json.loads(json.dumps(HESTON))
    mutate(cfg)
    assert main(["solve", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(ConfigError):
        RunConfig.from_dict(cfg)


def test_missing_file(tmp_path):
    assert main(["check", "--config", str(tmp_path / "nope.json")]) == 2


def test_solve_outputs_and_bytes(tmp_path):
    cfgp = write(tmp_path, HESTON)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["solve", "--config", cfgp, "--out", str(a)]) == 0
    assert main(["solve", "--config", cfgp, "--out", str(b)]) == 0
    for f in ("value_surface.csv", "policy_surface.csv", "bounds.txt"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    head = (a / "value_surface.csv").read_text().splitlines()
    assert head[0] == "t,x,y,z"
    assert (a / "policy_surface.csv").read_text().startswith("t,x,pi_star,ctilde_star\n")
    # 17 significant digits
    assert len(head[5].split(",")[2].replace("-", "").replace(".", "").split("e")[0]) >= 15
    bounds = dict(line.split() for line in (a / "bounds.txt").read_text().splitlines())
    assert float(bounds["max_upper_violation"]) <= 1e-3


def test_solve_constant_matches_oracle(tmp_path):
    out = tmp_path / "c"
    assert main(["solve", "--config", str(CONFIGS / "constant.json"), "--out", str(out)]) == 0
    rows = np.loadtxt(out / "value_surface.csv", delimiter=",", skiprows=1)
    t0 = rows[rows[:, 0] == 0.0]
    m = make_model(ConstantParams())
    ez = EZPreferences(5.0, 1.5, 0.08)
    assert np.ptp(t0[:, 2]) < 1e-12
    assert abs(t0[0, 2] - riccati_value(m, ez, 10.0, 0.0)) < 1e-6
    pol = np.loadtxt(out / "policy_surface.csv", delimiter=",", skiprows=1)
    assert np.ptp(pol[pol[:, 0] == 0.0][:, 2]) < 1e-12


def test_solve_numeric_failure(tmp_path):
    cfg = json.loads(json.dumps(HESTON))
    cfg["solver"].update(steps_per_unit=0.2, iter_max=2, iter_min=1)
    cfg["T"] = 50.0
    cfg["preferences"] = {"gamma": 40.0, "psi": 8.0, "delta": 3.0}
    assert main(["solve", "--config", write(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 3


def test_simulate_zero_vol(tmp_path):
    out = tmp_path / "z"
    assert main(["simulate", "--config", str(CONFIGS / "zero_vol.json"), "--out", str(out)]) == 0
    reps = json.loads((out / "sim_report.json").read_text())
    assert {r["name"] for r in reps} == {"budget_martingale", "value_martingale"}
    assert all(r["passed"] for r in reps)


def test_simulate_reproducible_with_overrides(tmp_path):
    cfg = json.loads(json.dumps(HESTON))
    cfg["simulation"]["dump_paths"] = True
    cfgp = write(tmp_path, cfg)
    runs = []
    for d in ("a", "b"):
        code = main(["simulate", "--config", cfgp, "--out", str(tmp_path / d), "--seed", "11", "--paths", "300", "--dt", "0.02"])
        assert code in (0, 1)
        runs.append(tmp_path / d)
    for f in ("sim_report.json", "paths.csv"):
        assert (runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
    reps = json.loads((runs[0] / "sim_report.json").read_text())
    assert reps[0]["n_paths"] == 300 and reps[0]["dt"] == 0.02
    assert (runs[0] / "paths.csv").read_text().startswith("path,t,x,wealth\n")


def test_bad_override(tmp_path):
    assert main(["simulate", "--config", write(tmp_path, HESTON), "--dt", "-1"]) == 2


def test_horizon_csv(tmp_path, capsys):
    out = tmp_path / "h"
    assert main(["horizon", "--config", write(tmp_path, HESTON), "--out", str(out)]) == 0
    lines = (out / "horizon.csv").read_text().splitlines()
    assert lines[0] == "horizon,psi,delta,ctilde0"
    assert len(lines) == 1 + 2 * 4
    assert "plateau" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    r = subprocess.run(
        [sys.executable, "-m", "ezinvest", "check", "--config", str(CONFIGS / "heston_reference.json")],
        capture_output=True, text=True,
    )
    assert r.returncode == 0
    assert "C1e" in r.stdout
