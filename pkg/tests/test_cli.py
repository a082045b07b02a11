import json
import os
import subprocess
import sys

import pytest

from relaxmfc import jsonio
from relaxmfc.cli import CertificationFailure, UsageError, main, run_experiment, strip_volatile


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


@pytest.fixture(scope="module")
def solved(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("runs"))
    man = run_experiment({"command": "solve", "spec": "builtin:linear-quadratic", "particles": 8, "steps": 8,
                          "tol": 1e-4, "iters": 200, "out": out})
    return out, man


def test_solve_zero_converges(tmp_path):
    man = run_experiment({"command": "solve", "spec": "builtin:zero", "particles": 4, "steps": 4,
                          "out": str(tmp_path)})
    assert man["results"]["converged"]
    assert man["results"]["optimality_gap"] == 0.0 and man["results"]["consistency_gap"] == 0.0
    assert os.path.basename(man["output_dir"]).startswith("solve-")
    for name in ("trace", "ensemble", "flow", "m0"):
        assert os.path.exists(os.path.join(man["output_dir"], man["artifacts"][name]["path"]))
    assert set(man) >= {"spec", "constants", "seeds", "grid", "timings", "tool_version", "reproducibility_hash"}


def test_unknown_keys_and_commands():
    with pytest.raises(UsageError, match="valid keys"):
        run_experiment({"command": "solve", "colour": "blue"})
    with pytest.raises(UsageError, match="valid: simulate"):
        run_experiment({"command": "launch"})
    with pytest.raises(UsageError):
        run_experiment({"command": "certify"})


def test_rerun_is_byte_identical(tmp_path, solved):
    out, man = solved
    again = run_experiment(dict(man["config"], out=str(tmp_path)))
    assert again["reproducibility_hash"] == man["reproducibility_hash"]
    a = jsonio.dumps(strip_volatile(jsonio.load(os.path.join(man["output_dir"], "manifest.json"))))
    b = jsonio.dumps(strip_volatile(jsonio.load(os.path.join(again["output_dir"], "manifest.json"))))
    assert a == b
    for art in man["artifacts"].values():
        assert _read(os.path.join(man["output_dir"], art["path"])) == \
            _read(os.path.join(again["output_dir"], art["path"]))


def test_certify_and_tamper(tmp_path, solved):
    out, man = solved
    cert = run_experiment({"command": "certify", "run": man["output_dir"], "out": str(tmp_path)})
    assert cert["results"]["passed"]
    bad = tmp_path / "tampered"
    bad.mkdir()
    for name in os.listdir(man["output_dir"]):
        (bad / name).write_text(_read(os.path.join(man["output_dir"], name)))
    ens = json.loads((bad / "ensemble.json").read_text())
    ens["paths"][0]["positions"][3][0] += 0.02
    (bad / "ensemble.json").write_text(json.dumps(ens))
    with pytest.raises(CertificationFailure) as err:
        run_experiment({"command": "certify", "run": str(bad), "out": str(tmp_path)})
    assert "support_residual" in err.value.failed and "artifact_digest" in err.value.failed


def test_strictify_run(tmp_path, solved):
    out, man = solved
    res = run_experiment({"command": "strictify", "run": man["output_dir"], "x_bins": 64, "out": str(tmp_path)})
    r = res["results"]
    assert r["status"] == "ok" and r["passed"]
    assert r["max_z1"] <= 1e-9 and r["max_f_match"] <= 1e-8
    header = _read(os.path.join(res["output_dir"], "selection.csv")).splitlines()[0]
    assert header == "cell,alpha,z1,z2,f_match"


def test_simulate_and_best_response(tmp_path):
    sim = run_experiment({"command": "simulate", "spec": "builtin:crowd-aversion", "particles": 5, "steps": 4,
                          "u": [0.25], "out": str(tmp_path)})
    assert sim["results"]["support_residual"] <= 1e-14
    lines = _read(os.path.join(sim["output_dir"], "paths.csv")).splitlines()
    assert lines[0] == "particle,node,t,weight,x0" and len(lines) == 1 + 5 * 5
    with pytest.raises(UsageError, match="not a control atom"):
        run_experiment({"command": "simulate", "u": [0.3], "out": str(tmp_path)})
    br = run_experiment({"command": "best-response", "method": "dp", "x0": [0.2], "steps": 8, "x_grid": 32,
                         "out": str(tmp_path)})
    assert br["results"]["method"] == "dp"
    with pytest.raises(UsageError):
        run_experiment({"command": "best-response", "method": "newton", "out": str(tmp_path)})


def test_resnet_and_check(tmp_path):
    man = run_experiment({"command": "resnet-train", "epochs": 20, "samples": 16, "out": str(tmp_path)})
    assert man["results"]["final_loss"] < man["results"]["initial_loss"]
    loss = _read(os.path.join(man["output_dir"], "loss.csv")).splitlines()
    assert loss[0] == "epoch,loss" and len(loss) == 22
    per = run_experiment({"command": "resnet-train", "epochs": 5, "samples": 4, "common_control": False,
                          "out": str(tmp_path)})
    assert "controls" in per["artifacts"]
    chk = run_experiment({"command": "check", "spec": "builtin:double-well", "samples": 100, "out": str(tmp_path)})
    assert chk["results"]["passed"]


def test_main_exit_codes(tmp_path, capsys, solved):
    out, man = solved
    assert main(["solve", "--spec", "builtin:zero", "--particles", "2", "--steps", "2", "--out", str(tmp_path)]) == 0
    assert main(["best-response", "--method", "grad", "--iters", "3", "--steps", "4", "--multistart",
                 "--out", str(tmp_path)]) == 0
    assert main(["simulate", "--u", "0.3", "--out", str(tmp_path)]) == 2
    assert "not a control atom" in capsys.readouterr().err
    assert main(["certify", "--run", man["output_dir"], "--out", str(tmp_path)]) == 0


def test_console_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "relaxmfc.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "mfc" in r.stdout
    r = subprocess.run([sys.executable, "-m", "relaxmfc.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 2
