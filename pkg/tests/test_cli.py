import json
import subprocess
import sys

import numpy as np
import pytest

from sfhr.model import builtin_toy_path, cleartext_forward, load_builtin_toy


def run_cli(*args, check=True):
    out = subprocess.run([sys.executable, "-m", "sfhr.cli", *args],
                         capture_output=True, text=True)
    if check:
        assert out.returncode == 0, out.stderr
    return out


def test_dp_calc():
    out = run_cli("dp-calc", "--eps0", "0", "--n", "1000", "--delta", "1e-6")
    assert json.loads(out.stdout)["eps"] == 0.0


def test_dp_calc_inapplicable():
    out = run_cli("dp-calc", "--eps0", "9", "--n", "100", "--delta", "1e-6", check=False)
    assert out.returncode != 0
    assert "inapplicable" in out.stderr


def test_infer_cleartext(tmp_path):
    model = load_builtin_toy()
    x = np.random.default_rng(0).integers(0, 4, model.input_shape)
    xp = tmp_path / "x.json"
    xp.write_text(json.dumps(x.tolist()))
    out = run_cli("infer", "--model", str(builtin_toy_path()), "--input", str(xp),
                  "--cleartext")
    scores = json.loads(out.stdout)["scores"]
    assert scores == cleartext_forward(model, x).tolist()


def test_infer_loopback_matches_oracle(tmp_path):
    model = load_builtin_toy()
    x = np.random.default_rng(1).integers(0, 4, model.input_shape)
    xp = tmp_path / "x.json"
    xp.write_text(json.dumps(x.tolist()))
    out = run_cli("infer", "--model", str(builtin_toy_path()), "--input", str(xp),
                  "--b", "8", "--gamma", "2", "--seed", "3")
    payload = json.loads(out.stdout)
    assert payload["scores"] == cleartext_forward(model, x).tolist()
    assert len(payload["phases"]) == len(model.rounds)


def test_invalid_gamma_rejected():
    out = run_cli("noise-audit", "--b", "8", "--gamma", "7", check=False)
    assert out.returncode != 0
    assert "gamma" in out.stderr


def test_invalid_beta_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"beta": 9}))
    out = run_cli("--config", str(cfg), "noise-audit", "--b", "8", "--gamma", "0",
                  check=False)
    assert out.returncode != 0


def test_keygen_writes_material(tmp_path):
    out_path = tmp_path / "keys.bin"
    run_cli("keygen", "--b", "8", "--gamma", "2", "--out", str(out_path), "--seed", "5")
    assert out_path.stat().st_size > 1000


def test_bench_csv_schema(tmp_path):
    out = run_cli("bench", "--model", str(builtin_toy_path()), "--bits", "8",
                  "--gammas", "1", "--inputs", "1")
    lines = out.stdout.strip().splitlines()
    assert lines[0] == "model,b,gamma,beta,phase,seconds,bytes_up,bytes_down,threads"
    phases = {l.split(",")[4] for l in lines[1:]}
    assert {"extract", "linear", "pack", "client"} <= phases


def test_attack_demo_runs():
    out = run_cli("attack-demo", "--dim", "8", "--seed", "1")
    assert "exact recovery True" in out.stdout
    assert "multisets recovered True" in out.stdout


def test_noise_audit_small(tmp_path):
    csv = tmp_path / "noise.csv"
    out = run_cli("noise-audit", "--b", "8", "--gamma", "2", "--coeffs", "500",
                  "--out", str(csv), "--seed", "2")
    assert "violations:     0" in out.stdout.replace("bound violations", "violations")
    assert csv.read_text().startswith("bin_left,bin_right,count")
