import json
import subprocess
import sys

import numpy as np
import pytest

from tfilter.cli import main, parse_domain, parse_init
from tfilter.errors import ConfigError
from tfilter.ulam import load_matrix


def test_parse_init_forms():
    fam, m, C = parse_init("gauss(2,0.1)", 1)
    assert fam == "gauss" and m.tolist() == [2.0] and C.tolist() == [[0.1]]
    fam, m, C = parse_init("gauss([0,0,0],[1,2,3])", 3)
    assert np.allclose(C, np.diag([1, 2, 3]))
    fam, _, _ = parse_init("benes(0, 2)", 1)
    assert fam == "benes"
    for bad in ("normal(0,1)", "gauss(1)", "gauss(a,b)", "gauss([0,0],1)"):
        with pytest.raises(ConfigError):
            parse_init(bad, 1)


def test_parse_domain():
    assert parse_domain("-25:25,-25:25,-30:20") == ([-25, -25, -30], [25, 25, 20])
    with pytest.raises(ConfigError):
        parse_domain("-6")


def test_ulam_simulate_filter_pipeline(tmp_path, capsys):
    mat, eig, obs = tmp_path / "b.pfo", tmp_path / "b.eig", tmp_path / "obs.csv"
    assert main(["ulam", "--model", "benes", "--domain=-10:10", "--grid", "80", "--tau", "0.1",
                 "--samples", "100", "--seed", "1", "--out-of-domain", "absorb", "--spectral", str(eig),
                 "--out", str(mat)]) == 0
    assert load_matrix(mat).n == 80
    assert main(["simulate", "--model", "benes", "--x0", "0", "--steps", "8", "--dt", "0.1",
                 "--seed", "2", "--out", str(obs)]) == 0
    for method, extra in [("pfof", []), ("lrpfof", ["--rank", "20", "--spectral", str(eig)]),
                          ("pf", ["--particles", "200"]), ("exkf", [])]:
        out = tmp_path / method
        assert main(["filter", "--method", method, "--matrix", str(mat), "--obs", str(obs),
                     "--init", "benes(0,2)", "--out", str(out)] + extra) == 0
        lines = (out / "trace.csv").read_text().splitlines()
        assert lines[0].startswith("step,t,mean_1,var_1") and len(lines) == 10


def test_ulam_quadrature(tmp_path):
    out = tmp_path / "ou.pfo"
    assert main(["ulam", "--model", "ou", "--lower", "-6", "--upper", "6", "--counts", "50",
                 "--tau", "0.1", "--estimator", "quadrature", "--out", str(out)]) == 0
    assert load_matrix(out).n == 50


def test_run_and_rates(tmp_path):
    cfg = tmp_path / "ou.json"
    cfg.write_text(json.dumps({"experiment": "ou", "counts": [80], "steps": 4,
                               "filters": {"pfof": {}, "exkf": {}}, "pdf_steps": [4]}))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r1"), "--no-timing"]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r2"), "--no-timing"]) == 0
    a = (tmp_path / "r1" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "r2" / "metrics.csv").read_bytes()
    assert main(["rates", "--study", "pfof", "--config", str(cfg), "--values", "25,50,100",
                 "--out", str(tmp_path / "rates")]) == 0
    assert (tmp_path / "rates" / "rates.csv").read_text().count("\n") == 4


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "ou", "tau": "fast"}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    numeric = tmp_path / "num.json"
    numeric.write_text(json.dumps({"experiment": "ou", "counts": [50], "steps": 2,
                                   "filters": {"lrpfof": {"ranks": [5]}}}))
    assert main(["run", "--config", str(numeric), "--out", str(tmp_path / "y")]) == 3
    outside = tmp_path / "outside.json"
    outside.write_text(json.dumps({"experiment": "ou", "counts": [50], "steps": 2,
                                   "initial": {"mean": [40.0], "cov": [[0.1]]}, "filters": {"pfof": {}}}))
    assert main(["run", "--config", str(outside), "--out", str(tmp_path / "w")]) == 2
    assert main(["ulam", "--model", "ou", "--grid", "5", "--tau", "0.1", "--out", str(tmp_path / "z")]) == 2


def test_schema_and_module_entry():
    proc = subprocess.run([sys.executable, "-m", "tfilter", "schema"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["properties"]["experiment"]["enum"] == ["ou", "benes", "lorenz63"]
