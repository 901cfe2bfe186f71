import json
import subprocess
import sys

import pytest
import yaml

from fbm_varadhan.cli import DEFAULTS, main, version_string

FAST_RATE = {"rate": {"restarts": 1, "grids": [8]}}


def _run(tmp_path, argv, config=None, name="out.json"):
    out = tmp_path / name
    args = list(argv) + ["--out", str(out)]
    if config is not None:
        cfg = tmp_path / f"{name}.yaml"
        cfg.write_text(yaml.safe_dump(config))
        args += ["--config", str(cfg)]
    code = main(args)
    doc = json.loads(out.read_text()) if out.exists() else None
    return code, doc


def test_fbm_check_default_passes(tmp_path):
    code, doc = _run(tmp_path, ["fbm-check", "--H", "0.5"])
    assert code == 0 and doc["status"] == "pass"
    assert len(doc["result"]["rows"]) == 6
    assert doc["config"]["fbm_check"]["N"] == 100000
    assert doc["version"] == version_string() and doc["command"] == "fbm-check"


def test_fbm_check_corrupted_hurst_fails(tmp_path):
    code, doc = _run(tmp_path, ["fbm-check", "--H", "0.5"], {"fbm_check": {"sample_H": 0.7}})
    assert code == 1 and doc["status"] == "fail"
    assert max(abs(r["z"]) for r in doc["result"]["rows"]) > 10


def test_fbm_check_zero_paths_is_usage_error(tmp_path, capsys):
    code, doc = _run(tmp_path, ["fbm-check", "--N", "0"])
    assert code == 2 and doc is None
    assert "usage error" in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main(["nonsense"]) == 2
    assert main(["rate", "--system", "nope", "--y", "1"]) == 2
    assert main(["rate", "--system", "scalar-linear"]) == 2
    assert main(["fbm-check", "--H", "1.5"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("unknown_key: 1\n")
    assert main(["rate", "--config", str(bad), "--y", "2"]) == 2
    assert main(["rate", "--system", "scalar-linear", "--y", "1,2"]) == 2


def test_hypo_check_cases(tmp_path):
    code, doc = _run(tmp_path, ["hypo-check", "--system", "elliptic-identity", "--l", "1"], name="a.json")
    assert code == 0 and doc["result"]["lambda_hat"] == pytest.approx(1.0)
    code, doc = _run(tmp_path, ["hypo-check", "--system", "heisenberg-sin", "--l", "2"], name="b.json")
    assert doc["result"]["lambda_hat"] < 1e-3
    code, doc = _run(tmp_path, ["hypo-check", "--system", "heisenberg-sin", "--l", "3"], name="c.json")
    assert code == 0 and doc["result"]["lambda_hat"] >= 0.15


def test_inline_fields(tmp_path):
    cfg = {"fields": [["1", "0"], ["0", "1"], ["0", "sin(x1)"]], "x0": [0, 0, 0]}
    code, doc = _run(tmp_path, ["hypo-check", "--l", "3"], cfg)
    assert code == 0 and doc["config"]["system"] == "inline"
    assert doc["result"]["lambda_hat"] >= 0.15


def test_rate_command(tmp_path):
    code, doc = _run(tmp_path, ["rate", "--system", "scalar-linear", "--y", "2", "--H", "0.7", "--m", "8"], FAST_RATE)
    assert code == 0
    assert doc["result"]["d2"]["d2"] == pytest.approx(0.24022650695910071, abs=1e-6)
    code, doc = _run(tmp_path, ["rate", "--system", "elliptic-perturbed", "--y", "0.5,0.2", "--m", "8",
                                "--restricted", "--delta-det", "1e-6"], FAST_RATE, name="r.json")
    assert code == 0 and doc["result"]["inclusion_ok"]
    assert doc["result"]["d2"]["d2"] <= doc["result"]["d2R"]["d2"]


def test_rate_batch_csv(tmp_path):
    grid = tmp_path / "ys.txt"
    grid.write_text("1.5\n2.0\n")
    csv_path = tmp_path / "rates.csv"
    code, doc = _run(tmp_path, ["rate", "--system", "scalar-linear", "--m", "8", "--y-grid", str(grid),
                                "--csv", str(csv_path)], FAST_RATE)
    assert code == 0 and len(doc["result"]["batch"]) == 2
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "y1,d2,d2R" and len(lines) == 3


def test_density_command_outputs(tmp_path):
    csv_path, plot = tmp_path / "d.csv", tmp_path / "d.dat"
    argv = ["density", "--system", "scalar-linear", "--y", "2", "--N", "20000", "--eps-grid", "0.5,0.4,0.3",
            "--csv", str(csv_path), "--plot", str(plot)]
    code, doc = _run(tmp_path, argv, FAST_RATE)
    assert code in (0, 1)
    assert len(doc["result"]["rows"]) == 3
    assert csv_path.read_text().startswith("eps,p_hat,stderr,v_hat")
    assert len(plot.read_text().splitlines()) == 3


def test_scaling_command(tmp_path):
    csv_path = tmp_path / "s.csv"
    argv = ["scaling", "--system", "elliptic-identity", "--N", "100", "--eps-grid", "1,0.5", "--bounds=-2.1,-1.9",
            "--csv", str(csv_path)]
    code, doc = _run(tmp_path, argv)
    assert code == 0 and doc["result"]["slope"] == pytest.approx(-2.0)
    code, doc = _run(tmp_path, [a for a in argv[:-2] if not a.startswith("--bounds")] + ["--bounds=-1,0"], name="s2.json")
    assert code == 1


def test_report_verdicts(tmp_path):
    base = ["report", "--N", "20000", "--eps-grid", "0.5,0.4,0.3,0.25,0.2"]
    code, doc = _run(tmp_path, base + ["--system", "scalar-linear", "--y", "2"], FAST_RATE, name="sl.json")
    v = doc["result"]["verdict"]
    assert code == 0 and v["verdict"] == "PASS"
    assert abs(v["v0"] + 0.24022650695910071) <= v["tol"]
    code, doc = _run(tmp_path, base + ["--system", "elliptic-identity", "--y", "1,0"], FAST_RATE, name="ei.json")
    assert code == 0 and doc["result"]["verdict"]["verdict"] == "PASS"
    code, doc = _run(tmp_path, ["report", "--system", "degenerate-line", "--y", "0.5,1", "--N", "5000",
                                "--eps-grid", "0.5,0.4"], FAST_RATE, name="dl.json")
    v = doc["result"]["verdict"]
    assert v["verdict"] == "UNREACHABLE" and v["d2"] is None
    assert v["note"] == "density decays faster than any exp(-c/eps^2) scale tested"


def test_print_config_resolution(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"H": 0.6, "density": {"N": 5000}}))
    out = tmp_path / "cfg.json"
    assert main(["density", "--config", str(cfg), "--H", "0.7", "--y", "2", "--print-config", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())["config"]
    # flags override the file, which overrides the defaults
    assert doc["H"] == 0.7 and doc["density"]["N"] == 5000 and doc["density"]["y"] == [2.0]
    assert doc["density"]["eps_grid"] == DEFAULTS["density"]["eps_grid"]
    assert doc["x0"] == [1.0]


def test_workers_do_not_change_output(tmp_path):
    argv = ["fbm-check", "--N", "2000"]
    _, a = _run(tmp_path, argv + ["--workers", "1"], name="w1.json")
    _, b = _run(tmp_path, argv + ["--workers", "4"], name="w4.json")
    assert a["result"] == b["result"]


def test_console_script():
    out = subprocess.run([sys.executable, "-m", "fbm_varadhan.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "fbm-check" in out.stdout
