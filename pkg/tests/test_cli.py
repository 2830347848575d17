import json
import subprocess
import sys

import numpy as np
import pytest

from thermovi.cli import evaluate, main, read_csv, sha256
from thermovi.errors import GridMismatch
from thermovi.nets import MlpArchitecture, MlpModel, load_model, save_model


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data(tmp_path):
    assert run("gen-data", "--system", "piston", "--n-traj", 5, "--traj-len", 2, "--out", tmp_path) == 0
    header, rows = read_csv(tmp_path / "dataset.csv")
    assert rows.shape == (5, 10) and header[0] == "traj_id"
    meta = json.loads((tmp_path / "dataset.meta.json").read_text())
    assert meta["n_traj"] == 5 and meta["system"] == "piston"
    manifest = json.loads((tmp_path / "manifest-gen-data.json").read_text())
    assert manifest["outputs"][str(tmp_path / "dataset.csv")] == sha256(tmp_path / "dataset.csv")
    assert manifest["config"]["n_traj"] == 5 and "version" in manifest


def test_gen_data_rigid(tmp_path):
    assert run("gen-data", "--system", "rigid_body", "--n-traj", 2, "--traj-len", 4, "--out", tmp_path) == 0
    header, rows = read_csv(tmp_path / "dataset.csv")
    assert rows.shape == (6, 10)
    assert json.loads((tmp_path / "dataset.meta.json").read_text())["system"] == "rigid_body"


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"momentum": 0.9}')
    assert run("gen-data", "--config", bad, "--out", tmp_path) == 2
    assert run("gen-data", "--config", tmp_path / "missing.json", "--out", tmp_path) == 2
    bad.write_text('{"params": {"A3": 1.0}}')
    assert run("gen-data", "--config", bad, "--out", tmp_path) == 2
    assert "error" in capsys.readouterr().err


def test_solver_failure_exit_3(tmp_path, capsys):
    assert run("simulate", "--system", "piston", "--h", 20, "--steps", 3, "--out", tmp_path) == 3
    assert "step 1" in capsys.readouterr().err


def test_invalid_init_exit_2(tmp_path):
    assert run("simulate", "--system", "piston", "--init", "2.5,0,1,1", "--out", tmp_path) == 2
    assert run("simulate", "--system", "piston", "--init", "0,0,1", "--out", tmp_path) == 2
    assert run("simulate", "--system", "piston", "--init", "0,0,1,-1", "--out", tmp_path) == 2


def test_nonfinite_exit_4(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lr_init": 1e300, "lr_final": 1e300, "hidden": [4]}))
    code = run("train", "--config", cfg, "--epochs", 3, "--n-traj", 2, "--traj-len", 3, "--quiet", "--out", tmp_path)
    assert code == 4
    assert (tmp_path / "model_F1.json").exists()


def test_newton_divergence_exit_5(tmp_path, capsys):
    # a constant G leaves the entropy line without a solution
    arch = MlpArchitecture(4, (3,), 1)
    save_model(tmp_path / "model_G.json", MlpModel(arch, np.zeros(arch.param_count)))
    assert run("simulate", "--system", "rigid_body", "--models", tmp_path, "--steps", 3, "--out", tmp_path) == 5
    assert "step 1" in capsys.readouterr().err


def test_train_simulate_evaluate(tmp_path):
    d = tmp_path / "data"
    assert run("gen-data", "--n-traj", 2, "--traj-len", 6, "--out", d) == 0
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": [5], "checkpoint_every": 10}))
    t = tmp_path / "train"
    assert run("train", "--config", cfg, "--dataset", d / "dataset.csv", "--epochs", 20, "--quiet", "--out", t) == 0
    header, loss = read_csv(t / "loss.csv")
    assert header == ["epoch", "loss", "lr"] and loss.shape == (20, 3)
    report = json.loads((t / "report.json").read_text())
    assert report["epochs"] == 20 and report["grad_check"]["max_rel_err"] < 1e-5
    s = tmp_path / "sim"
    assert run("simulate", "--models", t, "--steps", 10, "--out", s) == 0
    r = tmp_path / "ref"
    assert run("simulate", "--integrator", "reference", "--steps", 10, "--out", r) == 0
    header, traj = read_csv(s / "trajectory.csv")
    assert header == ["step", "t", "q1", "v1", "T1", "T2", "E", "S1", "S2", "p1"] and traj.shape == (11, 10)
    e = tmp_path / "eval"
    assert run("evaluate", "--trajectory", s / "trajectory.csv", "--reference", r / "trajectory.csv", "--out", e) == 0
    metrics = json.loads((e / "metrics.json").read_text())
    assert set(metrics["mae"]) == set(header[2:]) and metrics["n_steps"] == 10


def test_zero_epoch_run_persists_initial_model(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": [4], "seed": 3}))
    assert run("train", "--config", cfg, "--epochs", 0, "--n-traj", 1, "--traj-len", 3, "--quiet", "--out", tmp_path) == 0
    from thermovi.systems import Piston
    from thermovi.training import ModelSet
    init = ModelSet(Piston(), "learn_F", hidden=(4,)).init(3)
    saved = np.concatenate([load_model(tmp_path / f"model_F{i}.json").net.params for i in (1, 2)])
    assert np.array_equal(saved, init)


def test_resume_matches_uninterrupted(tmp_path, monkeypatch):
    import thermovi.cli as cli
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"hidden": [4], "checkpoint_every": 5}))
    common = ["--config", cfg, "--n-traj", 2, "--traj-len", 3, "--epochs", 12, "--quiet"]
    assert run("train", *common, "--out", tmp_path / "full") == 0

    real = cli.train

    def interrupted(*args, **kw):
        def log(msg):
            if msg.startswith("epoch      5"):
                raise KeyboardInterrupt
        return real(*args, **{**kw, "log": log})

    monkeypatch.setattr(cli, "train", interrupted)
    with pytest.raises(KeyboardInterrupt):
        run("train", *common, "--out", tmp_path / "part")
    assert json.loads((tmp_path / "part" / "checkpoint.json").read_text())["epoch"] == 5
    monkeypatch.setattr(cli, "train", real)
    assert run("train", *common, "--resume", "--out", tmp_path / "part") == 0
    for name in ("model_F1.json", "model_F2.json", "loss.csv"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_simulate_principal_axis_constant(tmp_path):
    assert run("simulate", "--system", "rigid_body", "--init", "0,0.7,0,1.5", "--steps", 20, "--out", tmp_path) == 0
    header, rows = read_csv(tmp_path / "trajectory.csv")
    assert header[:6] == ["step", "t", "Omega1", "Omega2", "Omega3", "T1"]
    # friction still acts on the spin, so only the f = 0 case is exactly constant
    from thermovi.integrators import simulate_so3
    from thermovi.systems import RigidBody
    rb = RigidBody()
    Y = simulate_so3(rb.G, None, np.array([0.0, 0.7, 0.0, 1.5]), 0.1, 20)
    assert np.ptp(Y, axis=0).max() < 1e-12


def test_evaluate_self_is_zero(tmp_path):
    assert run("simulate", "--steps", 20, "--out", tmp_path) == 0
    path = tmp_path / "trajectory.csv"
    assert run("evaluate", "--trajectory", path, "--reference", path, "--out", tmp_path) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert all(v == 0.0 for v in metrics["mae"].values()) and metrics["entropy_violations"] == 0


def test_evaluate_grid_mismatch(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("simulate", "--steps", 5, "--out", a) == 0
    assert run("simulate", "--steps", 6, "--out", b) == 0
    with pytest.raises(GridMismatch):
        evaluate(a / "trajectory.csv", b / "trajectory.csv")
    assert run("evaluate", "--trajectory", a / "trajectory.csv", "--reference", b / "trajectory.csv",
               "--out", tmp_path) == 2


def test_reference_vs_variational_piston(tmp_path):
    v, r = tmp_path / "v", tmp_path / "r"
    assert run("simulate", "--steps", 100, "--out", v) == 0
    assert run("simulate", "--integrator", "reference", "--steps", 100, "--out", r) == 0
    metrics, _ = evaluate(v / "trajectory.csv", r / "trajectory.csv")
    assert metrics["mae_observables"] < 1e-2 and metrics["entropy_violations"] == 0


def test_figures_are_opt_in(tmp_path):
    assert run("simulate", "--steps", 5, "--out", tmp_path) == 0
    path = tmp_path / "trajectory.csv"
    assert run("evaluate", "--trajectory", path, "--reference", path, "--out", tmp_path) == 0
    assert not list(tmp_path.glob("*.png"))
    assert run("evaluate", "--trajectory", path, "--reference", path, "--figures", "--out", tmp_path) == 0
    assert (tmp_path / "errors.png").exists() and (tmp_path / "trajectories.png").exists()


def test_console_script(tmp_path):
    out = subprocess.run([sys.executable, "-m", "thermovi.cli", "simulate", "--steps", "2", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert out.returncode == 0 and (tmp_path / "trajectory.csv").exists()
