"""Dataset generation, residual losses, Adam and the training loop.

Training never steps the integrator: the loss is the squared residual of the
discrete scheme on given observable pairs, so no implicit solve appears in
the gradient. The unknown side (``G``, the forces, or both) is a network;
the known side comes from the system's analytic model.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .autodiff import as_tensor, central_difference, tree_sum, value_and_grad
from .core import SO3, THERMAL, TrajectoryDataset
from .errors import ConfigError, NonfiniteLoss, NonpositiveTemperature, ThermoviError
from .integrators import (
    DEFAULT_OPTIONS,
    SchemeOptions,
    simulate_so3,
    simulate_thermal,
    so3_residuals_t,
    thermal_residuals_t,
)
from .nets import (
    DissipativeForceModel,
    MlpArchitecture,
    MlpModel,
    dissipative_force_t,
    init_params,
    mlp_apply,
)
from .systems import make_system, reference_integrate_array

REGIMES = ("learn_G", "learn_F", "learn_both")

GAUGE_WARNING = ("learn_both: the loss is invariant under scaling of (G, F), affine shifts of G and the "
                 "coordinate-temperature shift, so the learned pair is determined only up to these maps")


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    system: str = "piston"
    regime: str = "learn_F"
    epochs: int = 5000
    lr_init: float = 1e-2
    lr_final: float = 1e-4
    batch: int = 0
    seed: int = 0
    newton_tol: float = 1e-11
    n_traj: int = 25
    traj_len: int = 21
    h: float = 0.1
    box: dict | None = None
    hidden: tuple = (24, 24, 24)
    activation: str = "sigmoid"
    checkpoint_every: int = 500
    velocity: str = "state"
    force_midpoint: bool = False
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(x) for x in self.hidden))
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 < self.lr_final <= self.lr_init):
            raise ConfigError("learning rates need 0 < lr_final <= lr_init")
        if self.batch < 0:
            raise ConfigError("batch must be >= 0 (0 means full batch)")
        if self.n_traj < 1 or self.traj_len < 2 or not self.h > 0:
            raise ConfigError("dataset needs n_traj >= 1, traj_len >= 2 and h > 0")
        if self.velocity not in ("state", "difference"):
            raise ConfigError("velocity must be 'state' or 'difference'")

    @property
    def options(self) -> SchemeOptions:
        return SchemeOptions(self.force_midpoint, self.velocity)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# (system, regime) -> overrides; "paper" follows the published runs,
# "desk" keeps CI under a few minutes per run
PRESETS = {
    "paper": {
        ("piston", "learn_G"): dict(epochs=100000, lr_init=1e-3, lr_final=1e-3, n_traj=200),
        ("piston", "learn_F"): dict(epochs=50000, lr_init=1e-3, lr_final=1e-4, n_traj=200),
        ("rigid_body", "learn_G"): dict(epochs=5000, lr_init=1e-2, lr_final=1e-2, n_traj=100),
        ("rigid_body", "learn_F"): dict(epochs=300000, lr_init=1e-2, lr_final=1e-4, n_traj=100),
    },
    "desk": {
        ("piston", "learn_G"): dict(epochs=5000, lr_init=1e-2, lr_final=1e-3, n_traj=25),
        ("piston", "learn_F"): dict(epochs=5000, lr_init=1e-2, lr_final=1e-3, n_traj=25),
        ("rigid_body", "learn_G"): dict(epochs=5000, lr_init=5e-2, lr_final=1e-3, n_traj=25),
        ("rigid_body", "learn_F"): dict(epochs=5000, lr_init=5e-2, lr_final=1e-3, n_traj=25),
    },
}


def preset(name: str, system: str = "piston", regime: str = "learn_F", **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    key = (system, "learn_G" if regime == "learn_both" else regime)
    if key not in PRESETS[name]:
        raise ConfigError(f"no {name} preset for system {system!r}")
    return TrainConfig(system=system, regime=regime, **{**PRESETS[name][key], **overrides})


# --------------------------------------------------------------------------
# data

def default_box(system) -> dict:
    if system.kind == SO3:
        return {"mu": (-1.0, 1.0), "S": (0.0, 1.0)}
    return {"q": (-1.0, 1.0), "p": (-1.0, 1.0), "S": (0.0, 1.0)}


def generate_dataset(system, n_traj: int, traj_len: int, h: float, seed: int = 0, box: dict | None = None,
                     tol=(1e-10, 1e-12)) -> TrajectoryDataset:
    """Sample phase initial conditions, integrate, keep only the observables."""
    if n_traj < 1 or traj_len < 2 or not h > 0:
        raise ValueError("need n_traj >= 1, traj_len >= 2 and h > 0")
    rng = np.random.default_rng(seed)
    box = box or default_box(system)
    grid = h * np.arange(traj_len)
    start, end, ids = [], [], []
    for i in range(n_traj):
        y0 = system.pack(system.sample_phase(rng, box))
        try:
            obs = system.observables(reference_integrate_array(system, y0, grid, tol))
        except ThermoviError as exc:
            raise type(exc)(f"trajectory {i} (seed {seed}, y0={list(y0)}): {exc}") from exc
        start.append(obs[:-1])
        end.append(obs[1:])
        ids.append(np.full(traj_len - 1, i))
    meta = {"system": system.name, "seed": seed, "h": h, "n_traj": n_traj, "traj_len": traj_len,
            "tol": list(tol), "box": {k: list(v) for k, v in box.items()}}
    kind = SO3 if system.kind == SO3 else THERMAL
    return TrajectoryDataset(kind, system.n_q, system.n_T, np.vstack(start), np.vstack(end),
                             np.full(n_traj * (traj_len - 1), h), np.concatenate(ids), meta)


# --------------------------------------------------------------------------
# losses

def _tensors(d: TrajectoryDataset):
    for rows in (d.start, d.end):
        T = rows[:, -d.n_T:]
        if np.any(T <= 0):
            raise NonpositiveTemperature("dataset contains non-positive temperatures")
    return as_tensor(d.start), as_tensor(d.end), as_tensor(d.h)


def pair_losses_t(G, F, d: TrajectoryDataset, tensors=None, create_graph: bool = True,
                  options: SchemeOptions = DEFAULT_OPTIONS) -> torch.Tensor:
    """Per-pair ``|r_mom|^2 + |r_ent|^2``; the velocity line is the data's definition of ``v``."""
    a, b, h = tensors or _tensors(d)
    if d.kind == SO3:
        rm, re, _ = so3_residuals_t(G, F, a, b, h, create_graph, options)
    else:
        rm, re, _ = thermal_residuals_t(G, F, a, b, h, d.n_q, create_graph, options)
    return (rm * rm).sum(1) + (re * re).sum(1)


def loss_t(G, F, d, tensors=None, create_graph=True, options=DEFAULT_OPTIONS) -> torch.Tensor:
    return tree_sum(pair_losses_t(G, F, d, tensors, create_graph, options))


def loss_thermal(G, F, d: TrajectoryDataset, options: SchemeOptions = DEFAULT_OPTIONS) -> float:
    if d.kind != THERMAL:
        raise ValueError("loss_thermal needs a thermal dataset")
    return float(loss_t(G, F, d, create_graph=False, options=options).detach())


def loss_so3(G, f, d: TrajectoryDataset, options: SchemeOptions = DEFAULT_OPTIONS) -> float:
    if d.kind != SO3:
        raise ValueError("loss_so3 needs an so3 dataset")
    return float(loss_t(G, f, d, create_graph=False, options=options).detach())


# --------------------------------------------------------------------------
# learned fields

@dataclass(frozen=True)
class Component:
    role: str           # "G" or "F"
    name: str
    arch: MlpArchitecture
    n: int = 0          # velocity dimension for force networks


class ModelSet:
    """The trainable networks for one (system, regime) and their flat parameter layout.

    Piston forces are one single-output network per chamber (``F_i = -f_i^2 v``);
    the rigid body uses one network with six outputs.
    """

    def __init__(self, system, regime: str, hidden=(24, 24, 24), activation: str = "sigmoid"):
        if regime not in REGIMES:
            raise ConfigError(f"unknown regime {regime!r}")
        self.system, self.regime = system, regime
        d_in = system.n_q + system.n_T if system.kind == SO3 else 2 * system.n_q + system.n_T
        comps = []
        if regime in ("learn_G", "learn_both"):
            comps.append(Component("G", "G", MlpArchitecture(d_in, hidden, 1, activation)))
        if regime in ("learn_F", "learn_both"):
            n = system.n_q
            out = DissipativeForceModel.output_dim(n)
            if system.kind == SO3:
                comps.append(Component("F", "f", MlpArchitecture(d_in, hidden, out, activation), n))
            else:
                for i in range(system.n_T):
                    comps.append(Component("F", f"F{i + 1}", MlpArchitecture(d_in, hidden, out, activation), n))
        self.components = comps
        self.sizes = [c.arch.param_count for c in comps]
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)

    @property
    def n_params(self) -> int:
        return int(self.offsets[-1])

    def init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        return np.concatenate([init_params(c.arch, rng) for c in self.components])

    def split(self, theta):
        return [theta[self.offsets[k]:self.offsets[k + 1]] for k in range(len(self.components))]

    def fields(self, theta):
        """``(G, F)`` torch callables; the known side is the system's own model."""
        theta = theta if isinstance(theta, torch.Tensor) else as_tensor(theta)
        parts = dict(zip((c.name for c in self.components), zip(self.components, self.split(theta))))
        return field_pair(self.system, parts)

    def models(self, theta) -> dict:
        out = {}
        for c, p in zip(self.components, self.split(np.asarray(theta))):
            net = MlpModel(c.arch, p)
            out[c.name] = net if c.role == "G" else DissipativeForceModel(net, c.n)
        return out


def field_pair(system, parts: dict):
    """Build ``(G, F)`` from ``{name: (component, params_tensor)}``; missing parts fall back to the system."""
    so3 = system.kind == SO3
    if "G" in parts:
        c, p = parts["G"]
        if so3:
            def G(Om, T):
                return mlp_apply(c.arch, p, torch.cat([Om, T], 1))[:, 0]
        else:
            def G(q, v, T):
                return mlp_apply(c.arch, p, torch.cat([q, v, T], 1))[:, 0]
    else:
        G = system.G
    if so3 and "f" in parts:
        c, p = parts["f"]

        def F(Om, T):
            return dissipative_force_t(c.arch, p, torch.cat([Om, T], 1), Om, c.n)
    elif not so3 and "F1" in parts:
        chans = [parts[f"F{i + 1}"] for i in range(system.n_T)]

        def F(q, v, T):
            x = torch.cat([q, v, T], 1)
            return torch.stack([dissipative_force_t(c.arch, p, x, v, c.n) for c, p in chans], 1)
    else:
        F = system.forces
    return G, F


def fields_from_models(system, models: dict):
    """``(G, F)`` from saved models keyed ``G``, ``F1``.. or ``f``."""
    parts = {}
    for name, m in models.items():
        net = m.net if isinstance(m, DissipativeForceModel) else m
        comp = Component("F" if isinstance(m, DissipativeForceModel) else "G", name, net.arch,
                         m.n if isinstance(m, DissipativeForceModel) else 0)
        parts[name] = (comp, as_tensor(net.params))
    return field_pair(system, parts)


# --------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError("params, grad and Adam moments must have the same shape")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, t)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.epochs <= 1:
        return cfg.lr_init
    return cfg.lr_init * (cfg.lr_final / cfg.lr_init) ** (epoch / (cfg.epochs - 1))


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainReport:
    loss_history: list
    lr_history: list
    best_loss: float
    best_epoch: int
    params: np.ndarray
    final_params: np.ndarray
    models: dict
    wall_time: float
    grad_check: dict
    warnings: list = field(default_factory=list)

    @property
    def reduction_orders(self) -> float:
        if not self.loss_history:
            return 0.0
        return math.log10(self.loss_history[0] / self.best_loss)


def gradient_check(loss_fn, theta, n_indices: int = 5, seed: int = 0, step: float = 1e-6) -> dict:
    """Compare exact parameter gradients with central differences on a few coordinates."""
    _, g = value_and_grad(loss_fn, theta)
    idx = np.random.default_rng(seed).choice(theta.size, size=min(n_indices, theta.size), replace=False)
    fd = central_difference(lambda p: float(loss_fn(as_tensor(p)).detach()), theta, step, idx)
    rel = np.abs(g[idx] - fd) / np.maximum(np.maximum(np.abs(g[idx]), np.abs(fd)), 1e-12)
    return {"indices": idx.tolist(), "max_rel_err": float(rel.max()), "step": step}


def _save_checkpoint(path: Path, state: dict):
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(state))
    tmp.replace(path)


def train(cfg: TrainConfig, d: TrajectoryDataset, checkpoint: str | Path | None = None, resume: bool = False,
          grad_check: bool = True, log=None) -> TrainReport:
    """Full-batch (default) Adam on the residual loss with exponential learning-rate decay.

    With ``checkpoint`` set, the optimizer state is written every
    ``cfg.checkpoint_every`` epochs and at the end; ``resume=True`` picks up
    from it, reproducing the uninterrupted run bit for bit.
    """
    system = make_system(cfg.system, cfg.params)
    expect = SO3 if system.kind == SO3 else THERMAL
    if d.kind != expect or d.n_q != system.n_q or d.n_T != system.n_T:
        raise ConfigError(f"dataset kind {d.kind} (n_q={d.n_q}, n_T={d.n_T}) does not match system {cfg.system}")
    ms = ModelSet(system, cfg.regime, cfg.hidden, cfg.activation)
    options = cfg.options
    full = _tensors(d)
    rng = np.random.default_rng(cfg.seed + 1)

    def make_loss(tensors, sub):
        def loss_fn(theta_t):
            G, F = ms.fields(theta_t)
            return loss_t(G, F, sub, tensors, True, options)
        return loss_fn

    full_loss = make_loss(full, d)
    notes = [GAUGE_WARNING] if cfg.regime == "learn_both" else []
    if cfg.regime == "learn_both":
        warnings.warn(GAUGE_WARNING, stacklevel=2)

    theta = ms.init(cfg.seed)
    adam = AdamState.zeros(theta.size)
    history, lrs = [], []
    best_loss, best_epoch, best_theta = math.inf, -1, theta.copy()
    start_epoch = 0
    ckpt = Path(checkpoint) if checkpoint else None
    if resume and ckpt and ckpt.exists():
        st = json.loads(ckpt.read_text())
        theta = np.array(st["theta"])
        adam = AdamState(np.array(st["m"]), np.array(st["v"]), st["t"])
        history, lrs = st["loss_history"], st["lr_history"]
        best_loss, best_epoch, best_theta = st["best_loss"], st["best_epoch"], np.array(st["best_theta"])
        start_epoch = st["epoch"]
        rng.bit_generator.state = st["rng"]

    check = {}
    if grad_check:
        k = min(10, len(d))
        sub = d.subset(np.arange(k))
        check = gradient_check(make_loss(_tensors(sub), sub), theta, seed=cfg.seed)

    def snapshot(epoch):
        return {"epoch": epoch, "theta": theta.tolist(), "m": adam.m.tolist(), "v": adam.v.tolist(), "t": adam.t,
                "loss_history": history, "lr_history": lrs, "best_loss": best_loss, "best_epoch": best_epoch,
                "best_theta": best_theta.tolist(), "rng": rng.bit_generator.state, "config": cfg.to_dict()}

    t0 = time.perf_counter()
    for epoch in range(start_epoch, cfg.epochs):
        lr = learning_rate(cfg, epoch)
        if cfg.batch and cfg.batch < len(d):
            rows = np.sort(rng.permutation(len(d))[:cfg.batch])
            sub = d.subset(rows)
            loss_fn = make_loss(_tensors(sub), sub)
        else:
            loss_fn = full_loss
        value, grad = value_and_grad(loss_fn, theta)
        if not (math.isfinite(value) and np.all(np.isfinite(grad))):
            if ckpt:
                _save_checkpoint(ckpt, snapshot(epoch))
            raise NonfiniteLoss(f"non-finite loss at epoch {epoch}", epoch=epoch, last_good=best_theta.copy())
        history.append(value)
        lrs.append(lr)
        if value < best_loss:
            best_loss, best_epoch, best_theta = value, epoch, theta.copy()
        theta, adam = adam_step(theta, grad, adam, lr)
        if log and (epoch % max(1, cfg.checkpoint_every) == 0 or epoch == cfg.epochs - 1):
            log(f"epoch {epoch:6d}  loss {value:.6e}  lr {lr:.3e}")
        if ckpt and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            _save_checkpoint(ckpt, snapshot(epoch + 1))
    if cfg.epochs == 0 or best_epoch < 0:
        best_theta = theta.copy()
        best_loss = float(full_loss(as_tensor(theta)).detach()) if len(d) else 0.0
    if ckpt:
        _save_checkpoint(ckpt, snapshot(max(cfg.epochs, start_epoch)))
    return TrainReport(history, lrs, best_loss, best_epoch, best_theta, theta.copy(), ms.models(best_theta),
                       time.perf_counter() - t0, check, notes)


# --------------------------------------------------------------------------
# evaluation helpers

def simulate_fields(system, G, F, a0: np.ndarray, h: float, steps: int, tol: float = 1e-11,
                    options: SchemeOptions = DEFAULT_OPTIONS) -> np.ndarray:
    if system.kind == SO3:
        return simulate_so3(G, F, a0, h, steps, tol, options=options)
    return simulate_thermal(G, F, a0, h, steps, system.n_q, tol, options=options)


def reconstruction_mae(system, G, F, y0=None, h: float = 0.1, steps: int = 100, tol: float = 1e-11) -> dict:
    """Roll the variational integrator with ``(G, F)`` and compare observables to the reference solver."""
    y0 = system.pack(system.validation_phase()) if y0 is None else np.asarray(y0, dtype=np.float64)
    ref = system.observables(reference_integrate_array(system, y0, h * np.arange(steps + 1)))
    sim = simulate_fields(system, G, F, ref[0], h, steps, tol)
    err = np.abs(sim - ref)
    return {"mae": float(err.mean()), "per_component": err.mean(0).tolist(), "max": float(err.max()),
            "simulated": sim, "reference": ref}
