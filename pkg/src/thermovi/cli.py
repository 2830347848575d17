"""Command-line entry point: ``thermovi {gen-data,train,simulate,evaluate}``.

Exit codes
    0  success
    2  configuration or input error (bad config, mismatched grids)
    3  reference solver failure during data generation
    4  non-finite training loss
    5  Newton divergence in a variational step

Configuration resolves in three layers: the named preset for
``(system, regime)``, then the JSON ``--config`` file, then explicit flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .core import SO3, ObservableState, ReducedObservable, TrajectoryDataset
from .errors import (
    ConfigError,
    GridMismatch,
    NewtonDiverged,
    NonfiniteLoss,
    OutsidePhysicalDomain,
    PistonOutOfRange,
    StepSizeUnderflow,
)
from .integrators import so3_conjugates, thermal_conjugates
from .nets import load_model, save_model
from .systems import make_system, reference_integrate_array
from .training import ModelSet, TrainConfig, fields_from_models, generate_dataset, preset, simulate_fields, train

EXIT_CONFIG, EXIT_SOLVER, EXIT_NONFINITE, EXIT_NEWTON = 2, 3, 4, 5
ENTROPY_SLACK = 1e-12


# --------------------------------------------------------------------------
# manifest and file helpers

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest:
    def __init__(self, command: str, argv, config: dict, seed: int):
        self.data = {"command": command, "argv": list(argv), "config": config, "seed": seed,
                     "version": __version__, "started": _now(), "inputs": {}, "outputs": {}}

    def add_input(self, path):
        self.data["inputs"][str(path)] = sha256(path)

    def add_output(self, path):
        self.data["outputs"][str(path)] = sha256(path)

    def write(self, out: Path) -> Path:
        self.data["finished"] = _now()
        path = out / f"manifest-{self.data['command']}.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([str(x) if isinstance(x, (int, np.integer)) else _fmt(x) for x in row])
    return Path(path)


def read_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise GridMismatch(f"{path} is empty")
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))


# --------------------------------------------------------------------------
# configuration

def resolve_config(args) -> TrainConfig:
    file_cfg = {}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
    system = args.system or file_cfg.get("system", "piston")
    regime = getattr(args, "regime", None) or file_cfg.get("regime", "learn_F")
    base = preset(args.preset, system, regime).to_dict()
    base.update(file_cfg)
    base.update(system=system, regime=regime)
    flags = {"seed": args.seed, "epochs": getattr(args, "epochs", None), "n_traj": getattr(args, "n_traj", None),
             "traj_len": getattr(args, "traj_len", None)}
    if args.command in ("gen-data", "train"):
        flags["h"] = args.h
    base.update({k: v for k, v in flags.items() if v is not None})
    cfg = TrainConfig.from_dict(base)
    make_system(cfg.system, cfg.params)
    return cfg


def _system(cfg: TrainConfig):
    return make_system(cfg.system, cfg.params)


# --------------------------------------------------------------------------
# commands

def cmd_gen_data(args, out: Path, manifest: RunManifest) -> int:
    cfg = resolve_config(args)
    manifest.data["config"] = cfg.to_dict()
    d = generate_dataset(_system(cfg), cfg.n_traj, cfg.traj_len, cfg.h, cfg.seed, cfg.box)
    path = d.to_csv(out / "dataset.csv")
    manifest.add_output(path)
    manifest.add_output(path.with_name("dataset.meta.json"))
    print(f"wrote {len(d)} pairs to {path}")
    return 0


def cmd_train(args, out: Path, manifest: RunManifest) -> int:
    cfg = resolve_config(args)
    manifest.data["config"] = cfg.to_dict()
    if args.dataset:
        d = TrajectoryDataset.from_csv(args.dataset)
        manifest.add_input(args.dataset)
    else:
        d = generate_dataset(_system(cfg), cfg.n_traj, cfg.traj_len, cfg.h, cfg.seed, cfg.box)
        d.to_csv(out / "dataset.csv")
        manifest.add_output(out / "dataset.csv")
    log = None if args.quiet else (lambda msg: print(msg, flush=True))
    try:
        report = train(cfg, d, checkpoint=out / "checkpoint.json", resume=args.resume, log=log)
    except NonfiniteLoss as exc:
        for name, model in ModelSet(_system(cfg), cfg.regime, cfg.hidden, cfg.activation).models(exc.last_good).items():
            manifest.add_output(save_model(out / f"model_{name}.json", model))
        raise
    for name, model in report.models.items():
        manifest.add_output(save_model(out / f"model_{name}.json", model))
    loss_csv = write_csv(out / "loss.csv", ["epoch", "loss", "lr"],
                         ([k, l, r] for k, (l, r) in enumerate(zip(report.loss_history, report.lr_history))))
    manifest.add_output(loss_csv)
    summary = {"best_loss": report.best_loss, "best_epoch": report.best_epoch,
               "initial_loss": report.loss_history[0] if report.loss_history else report.best_loss,
               "reduction_orders": report.reduction_orders, "epochs": len(report.loss_history),
               "grad_check": report.grad_check, "warnings": report.warnings, "wall_time": report.wall_time}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    manifest.add_output(out / "report.json")
    manifest.add_output(out / "checkpoint.json")
    if args.figures and report.loss_history:
        from .plotting import plot_loss
        manifest.add_output(plot_loss(np.arange(len(report.loss_history)), report.loss_history, out / "loss.png"))
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"best loss {report.best_loss:.6e} at epoch {report.best_epoch}; "
          f"{report.reduction_orders:.2f} orders below the initial loss")
    return 0


def trajectory_header(system) -> list[str]:
    if system.kind == SO3:
        obs = ["Omega1", "Omega2", "Omega3", "T1"]
        return ["step", "t", *obs, "E", "S1", "mu1", "mu2", "mu3"]
    n, P = system.n_q, system.n_T
    obs = [f"q{i + 1}" for i in range(n)] + [f"v{i + 1}" for i in range(n)] + [f"T{i + 1}" for i in range(P)]
    return ["step", "t", *obs, "E", *[f"S{i + 1}" for i in range(P)], *[f"p{i + 1}" for i in range(n)]]


def trajectory_rows(system, G, obs: np.ndarray, phase: np.ndarray | None, h: float):
    """Assemble trajectory columns; ``phase`` (reference runs) supplies exact ``E, S, p``."""
    if phase is not None:
        H = system.hamiltonian
        if system.kind == SO3:
            E = H(torch.as_tensor(phase[:, :3]), torch.as_tensor(phase[:, 3:])).numpy()
            S, mom = phase[:, 3:], phase[:, :3]
        else:
            n = system.n_q
            E = H(torch.as_tensor(phase[:, :n]), torch.as_tensor(phase[:, n:2 * n]),
                  torch.as_tensor(phase[:, 2 * n:])).numpy()
            S, mom = phase[:, 2 * n:], phase[:, n:2 * n]
    elif system.kind == SO3:
        E, mom, S = so3_conjugates(G, obs)
    else:
        E, mom, S = thermal_conjugates(G, obs, system.n_q)
    steps = np.arange(len(obs))
    for k in steps:
        yield [int(k), k * h, *obs[k], E[k], *S[k], *mom[k]]


def _parse_init(text: str, system):
    vals = np.array([float(x) for x in text.split(",")])
    width = system.n_q + system.n_T if system.kind == SO3 else 2 * system.n_q + system.n_T
    if vals.size != width:
        raise ConfigError(f"--init needs {width} comma-separated observables, got {vals.size}")
    if np.any(vals[-system.n_T:] <= 0):
        raise ConfigError("initial temperatures must be positive")
    return vals


def cmd_simulate(args, out: Path, manifest: RunManifest) -> int:
    cfg = resolve_config(args)
    manifest.data["config"] = cfg.to_dict()
    system = _system(cfg)
    if args.init:
        a0 = _parse_init(args.init, system)
        n = system.n_q
        try:
            if system.kind == SO3:
                state = system.phase_from_observable(ReducedObservable(a0[:3], a0[3]))
            else:
                state = system.phase_from_observable(ObservableState(a0[:n], a0[n:2 * n], a0[2 * n:]))
        except (PistonOutOfRange, OutsidePhysicalDomain) as exc:
            raise ConfigError(f"invalid --init: {exc}") from None
        y0 = system.pack(state)
    else:
        y0 = system.pack(system.validation_phase())
        a0 = system.observables(y0)[0]
    h, steps = args.h, args.steps
    if args.integrator == "reference":
        phase = reference_integrate_array(system, y0, h * np.arange(steps + 1))
        obs = system.observables(phase)
        G = system.G
    else:
        models = {}
        if args.models:
            for path in sorted(Path(args.models).glob("model_*.json")):
                models[path.stem[len("model_"):]] = load_model(path)
                manifest.add_input(path)
        G, F = fields_from_models(system, models)
        obs = simulate_fields(system, G, F, a0, h, steps, cfg.newton_tol, cfg.options)
        phase = None
    path = write_csv(out / "trajectory.csv", trajectory_header(system), trajectory_rows(system, G, obs, phase, h))
    manifest.add_output(path)
    print(f"wrote {steps + 1} states to {path}")
    return 0


def _aligned_columns(header):
    """Non-observable columns are defined up to a constant (affine gauge of G)."""
    return [c for c in header if c == "E" or c[0] in "Sp" or c.startswith("mu")]


def evaluate(traj_path, ref_path) -> tuple[dict, dict]:
    th, T = read_csv(traj_path)
    rh, R = read_csv(ref_path)
    if th != rh:
        raise GridMismatch(f"column mismatch: {th} vs {rh}")
    if T.shape != R.shape or not np.allclose(T[:, 1], R[:, 1], rtol=0, atol=1e-12):
        raise GridMismatch("trajectory and reference are on different time grids")
    cols = {name: k for k, name in enumerate(th)}
    shifted = _aligned_columns(th)
    errors, mae = {}, {}
    for name in th[2:]:
        x, y = T[:, cols[name]], R[:, cols[name]]
        if name in shifted and len(x):
            x = x - x[-1] + y[-1]
        errors[name] = np.abs(x - y)
        mae[name] = float(errors[name].mean()) if len(x) else 0.0
    E = T[:, cols["E"]]
    drift = float(np.abs(E - E[0]).max() / abs(E[0])) if len(E) and E[0] != 0 else 0.0
    s_cols = [c for c in th if c.startswith("S")]
    violations = int(sum((np.diff(T[:, cols[c]]) < -ENTROPY_SLACK).sum() for c in s_cols))
    observable = [c for c in th[2:] if c not in shifted]
    metrics = {"mae": mae, "mae_observables": float(np.mean([mae[c] for c in observable])),
               "energy_drift": drift, "entropy_violations": violations, "n_steps": int(len(T) - 1),
               "aligned_columns": shifted}
    curves = {"t": T[:, 1], "energy_rel": (E - E[0]) / abs(E[0]) if len(E) and E[0] else E * 0,
              "errors": {c: errors[c] for c in observable}, "traj": T, "ref": R, "header": th}
    return metrics, curves


def cmd_evaluate(args, out: Path, manifest: RunManifest) -> int:
    metrics, curves = evaluate(args.trajectory, args.reference)
    manifest.add_input(args.trajectory)
    manifest.add_input(args.reference)
    path = out / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    manifest.add_output(path)
    if args.figures:
        from .plotting import plot_errors, plot_trajectories
        h, T, R = curves["header"], curves["traj"], curves["ref"]
        cols = {c: T[:, k] for k, c in enumerate(h) if k >= 2}
        ref = {c: R[:, k] for k, c in enumerate(h) if k >= 2}
        for c in metrics["aligned_columns"]:
            cols[c] = cols[c] - cols[c][-1] + ref[c][-1]
        manifest.add_output(plot_trajectories(curves["t"], cols, out / "trajectories.png", ref))
        manifest.add_output(plot_errors(curves["t"], curves["energy_rel"], curves["errors"], out / "errors.png"))
    print(json.dumps({k: metrics[k] for k in ("mae_observables", "energy_drift", "entropy_violations")}))
    return 0


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with TrainConfig keys")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, default=1, help="torch threads; 1 gives bitwise determinism")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--preset", choices=["paper", "desk"], default="desk")
    common.add_argument("--system", choices=["piston", "rigid_body"])

    p = argparse.ArgumentParser(prog="thermovi", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--n-traj", type=int)
    data.add_argument("--traj-len", type=int, help="points per trajectory (pairs = n_traj * (traj_len - 1))")
    data.add_argument("--h", type=float, help="time between the points of a pair")

    sub.add_parser("gen-data", parents=[common, data], help="generate an observable dataset")

    t = sub.add_parser("train", parents=[common, data], help="learn G or the forces from a dataset")
    t.add_argument("--regime", choices=["learn_G", "learn_F", "learn_both"])
    t.add_argument("--dataset", help="dataset CSV; generated from the config when omitted")
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")
    t.add_argument("--figures", action="store_true")
    t.add_argument("--quiet", action="store_true")

    s = sub.add_parser("simulate", parents=[common], help="roll a trajectory")
    s.add_argument("--models", help="directory with model_*.json from a training run; analytic fields otherwise")
    s.add_argument("--integrator", choices=["variational", "reference"], default="variational")
    s.add_argument("--init", help="comma-separated initial observables; validation point by default")
    s.add_argument("--steps", type=int, default=500)
    s.add_argument("--h", type=float, default=0.1)

    e = sub.add_parser("evaluate", parents=[common], help="compare a trajectory against a reference")
    e.add_argument("--trajectory", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--figures", action="store_true")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, argv, {}, args.seed)
    try:
        code = COMMANDS[args.command](args, out, manifest)
    except (ConfigError, GridMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StepSizeUnderflow, PistonOutOfRange, OutsidePhysicalDomain) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except NonfiniteLoss as exc:
        print(f"non-finite loss at epoch {exc.epoch}; last good model saved", file=sys.stderr)
        manifest.write(out)
        return EXIT_NONFINITE
    except NewtonDiverged as exc:
        print(f"Newton diverged at step {exc.step}: residual {exc.residual:.3e}", file=sys.stderr)
        return EXIT_NEWTON
    manifest.write(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
