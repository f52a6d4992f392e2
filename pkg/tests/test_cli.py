import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from cpip.cli import main


def write_config(path, **fields):
    cfg = {"actions": ["a1", "a2", "a3"], "nu": [0.4, 0.4, 0.2], "cost": [2, 1, 1]}
    cfg.update(fields)
    path.write_text(json.dumps(cfg, indent=2))
    return str(path)


def read_rows(text):
    body = [line for line in text.splitlines() if not line.startswith("#")]
    return list(csv.DictReader(io.StringIO("\n".join(body))))


@pytest.fixture
def ipi_config(tmp_path):
    return write_config(tmp_path / "ipi.json", actions=["0", "1"], nu=[0, 1], cost=[1, 1],
                        delta=[0, math.log(2)])


def test_tilt_ipi(ipi_config, capsys):
    assert main(["tilt", "--config", ipi_config, "--pi", "0.5,0.5"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# cpip ")
    rows = [r for r in read_rows(out) if r["action"] == "1"]
    assert float(rows[0]["pi_star"]) == pytest.approx(0.5, abs=1e-12)
    assert float(rows[1]["pi_star"]) == pytest.approx(2 / 3, abs=1e-12)
    assert all(float(r["nu_star"]) == 1.0 for r in rows)


def test_tilt_zero_delta_echoes(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", delta=[0])
    assert main(["tilt", "--config", cfg, "--pi", "0.2,0.3,0.5"]) == 0
    for r in read_rows(capsys.readouterr().out):
        assert float(r["pi_star"]) == pytest.approx(float(r["pi"]), abs=1e-15)
        assert float(r["nu_star"]) == pytest.approx(float(r["nu"]), abs=1e-15)


def test_bad_nu_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", nu=[0.5, 0.4, 0.2])
    assert main(["tilt", "--config", cfg, "--pi", "0.2,0.3,0.5"]) == 2
    err = capsys.readouterr().err
    assert "'nu'" in err and "line" in err


def test_negative_cost_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.json", cost=[1, -1, 1])
    assert main(["couple", "--config", cfg, "--pi", "0.2,0.3,0.5", "--delta", "1"]) == 2
    assert "'cost'" in capsys.readouterr().err


def test_couple(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["couple", "--config", cfg, "--pi", "0.2,0.3,0.5", "--delta", "1"]) == 0
    rows = read_rows(capsys.readouterr().out)
    src = [float(r["source_marginal"]) for r in rows[:3]]
    np.testing.assert_allclose(src, [0.256976098236, 0.327701337247, 0.415322564517], atol=1e-11)
    footer = rows[3]
    assert footer["source\\target"] == "target_marginal"
    np.testing.assert_allclose([float(footer[a]) for a in ("a1", "a2", "a3")],
                               [0.255240971471, 0.461613664114, 0.283145364415], atol=1e-11)


def test_couple_zero_delta_is_product(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["couple", "--config", cfg, "--pi", "0.2,0.3,0.5", "--delta", "0"]) == 0
    rows = read_rows(capsys.readouterr().out)
    joint = np.array([[float(r[a]) for a in ("a1", "a2", "a3")] for r in rows[:3]])
    np.testing.assert_allclose(joint, np.outer([0.2, 0.3, 0.5], [0.4, 0.4, 0.2]), atol=1e-15)


@pytest.fixture(scope="module")
def emitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    path = d / "data.csv"
    assert main(["simulate", "--emit-data", str(path), "--n", "400", "--seed", "3"]) == 0
    return path


def test_emit_data_schema(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["simulate", "--emit-data", str(path), "--n", "100"]) == 0
    rows = read_rows(path.read_text())
    assert len(rows) == 100
    assert list(rows[0]) == ["W1", "W2", "W3", "W4", "A", "Y"]
    assert {r["A"] for r in rows} <= {"0", "1", "2"}


def test_estimate_round_trip(emitted, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", delta={"min": -1, "max": 1, "points": 5})
    out = tmp_path / "est"
    code = main(["estimate", "--config", cfg, "--data", str(emitted), "--out", str(out),
                 "--seed", "1", "--bootstrap", "200"])
    assert code == 0
    rows = read_rows((out / "curve.csv").read_text())
    assert len(rows) == 5
    for r in rows:
        for key, val in r.items():
            assert math.isfinite(float(val)), key
        assert float(r["S_lower_uniform"]) <= float(r["mu_S_onestep"]) <= float(r["S_upper_uniform"])
    summary = json.loads((out / "estimate.json").read_text())
    assert summary["n"] == 400 and summary["B"] == 200
    assert set(summary["critical_values"]) == {"S", "T"}
    assert len(summary["nuisances"]) == 5


def test_estimate_byte_identical(emitted, tmp_path):
    cfg = write_config(tmp_path / "c.json", delta=[0.0, 1.0])
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["estimate", "--config", cfg, "--data", str(emitted), "--out", str(out),
                     "--seed", "7", "--bootstrap", "200"]) == 0
        outs.append(((out / "curve.csv").read_bytes(), (out / "estimate.json").read_bytes()))
    assert outs[0] == outs[1]


def test_estimate_too_few_rows(tmp_path, capsys):
    data = tmp_path / "tiny.csv"
    data.write_text("W1,A,Y\n0.1,a1,1\n0.2,a2,2\n0.3,a3,3\n")
    cfg = write_config(tmp_path / "c.json")
    assert main(["estimate", "--config", cfg, "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 3
    assert "smaller than k_folds" in capsys.readouterr().err


def test_estimate_empty_arm(tmp_path, capsys):
    rng = np.random.default_rng(0)
    lines = ["W1,A,Y"] + [f"{rng.normal():.6f},{['a1', 'a2'][i % 2]},{rng.normal():.6f}"
                          for i in range(40)]
    data = tmp_path / "d.csv"
    data.write_text("\n".join(lines) + "\n")
    cfg = write_config(tmp_path / "c.json")
    assert main(["estimate", "--config", cfg, "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 3
    assert "empty arm" in capsys.readouterr().err


def test_estimate_degenerate_variance(tmp_path, capsys):
    lines = ["W1,A,Y"] + [f"{i / 10:.1f},{['a1', 'a2', 'a3'][i % 3]},5" for i in range(60)]
    data = tmp_path / "d.csv"
    data.write_text("\n".join(lines) + "\n")
    cfg = write_config(tmp_path / "c.json", delta=[0.0])
    assert main(["estimate", "--config", cfg, "--data", str(data),
                 "--out", str(tmp_path / "o")]) == 4
    assert "degenerate EIF variance" in capsys.readouterr().err


def test_simulate_report(tmp_path):
    out = tmp_path / "sim"
    args = ["simulate", "--setup", "2", "--n", "200", "--reps", "2", "--n-mc", "100000",
            "--delta-min", "-1", "--delta-max", "1", "--delta-points", "3", "--seed", "5",
            "--out", str(out), "--threads", "1"]
    assert main(args) == 0
    rows = read_rows((out / "report.csv").read_text())
    assert len(rows) == 6
    for r in rows:
        assert float(r["S_iBias"]) <= float(r["S_iRMSE"]) + 1e-12
    first = (out / "report.csv").read_bytes()
    assert main(args[:-2] + ["--threads", "2"]) == 0
    assert (out / "report.csv").read_bytes() == first


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cpip", "--version"],
                          capture_output=True, text=True, check=True)
    assert proc.stdout.strip() == "0.1.0"
