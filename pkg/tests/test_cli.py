import subprocess
import sys

import pytest

from cemflow.cli import main
from cemflow.harness import read_report


def test_help_runs_as_module():
    out = subprocess.run([sys.executable, "-m", "cemflow", "--help"], capture_output=True,
                         text=True, check=True)
    assert "run" in out.stdout and "sweep" in out.stdout and "verify" in out.stdout


def test_run_writes_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("experiment: E1\nn: 16\nHdiv: 4\nm: 2\n")
    assert main(["--threads", "1", "--seed", "3", "run", "--config", str(cfg),
                 "--out", str(tmp_path / "out")]) == 0
    rows = read_report(tmp_path / "out")
    assert len(rows) == 1 and rows[0].m == 2 and rows[0].dim_Vms == 64
    assert (tmp_path / "out" / "fields" / "E1_fem_p1.txt").exists()
    assert "report.csv" in capsys.readouterr().out


def test_run_custom_problem(tmp_path):
    from cemflow.model import write_raster
    import numpy as np
    write_raster(tmp_path / "k.txt", np.linspace(1, 50, 64), 8, 8)
    cfg = tmp_path / "c.yaml"
    cfg.write_text("custom:\n  name: mine\n  fields: [k.txt]\n"
                   "  nonlinearity: [{tag: gardner, alpha: 0.1}]\n"
                   "  sources: [{tag: constant, value: 1}]\n  T: 0.5\n  S: 2\n"
                   "n: 8\nHdiv: 2\nm: 1\nn_basis: 3\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert read_report(tmp_path / "o")[0].experiment == "mine"


@pytest.mark.parametrize("text", ["experiment: E1\nbogus: 1\n", "custom: {fields: [missing.txt], "
                                  "nonlinearity: [{tag: constant}], sources: [{tag: constant}]}\nn: 8\nHdiv: 2\n"])
def test_run_bad_config_exit_one(tmp_path, capsys, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "error:" in capsys.readouterr().err


def test_missing_config_exit_one(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 1


def test_sweep_small(tmp_path):
    code = main(["sweep", "--experiment", "E1", "--n", "16", "--hdiv", "2", "4", "--basis", "3",
                 "--out", str(tmp_path)])
    rows = read_report(tmp_path)
    assert [r.dim_Vms for r in rows] == [12, 48]
    assert code == 0


def test_verify_flags_bad_report(tmp_path):
    (tmp_path / "report.csv").write_text(
        "experiment,H,m,L,dim_Vms,dim_Vh,err_H1,err_L2,picard_mean_fine,picard_mean_coarse,"
        "lambda_hat,offline_s,online_s\nE1,0.25,3,4,63,16129,0.1,0.01,3.0,3.0,0.0,1.0,1.0\n")
    assert main(["verify", "--out", str(tmp_path)]) == 2
    text = (tmp_path / "verify.txt").read_text()
    assert "FAIL  E1 H=1/4 L=4: dim_Vms" in text
    assert "PASS  fine FEM L2 order" in text
