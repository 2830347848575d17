"""Feedforward networks and the strictly dissipative force construction.

A dissipative force network maps its inputs to ``n(n-1)/2`` skew coordinates
``c`` and ``n`` unrestricted values ``f``, then returns

    F = -Q diag(f**2) Q^T v,    Q = exp(sum_{i<j} c_ij E_ij)

so ``F . v = -|diag(f) Q^T v|^2 <= 0`` for every parameter vector.
``E_ij`` has ``+1`` at ``(i, j)`` and ``-1`` at ``(j, i)``; the coordinates
are ordered lexicographically in ``(i, j)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .autodiff import as_tensor
from .errors import ArityMismatch

ACTIVATIONS = {"sigmoid": torch.sigmoid, "tanh": torch.tanh}


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(ACTIVATIONS)}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = (self.input_dim, *self.hidden, self.output_dim)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def param_count(self) -> int:
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_dims)

    def to_dict(self) -> dict:
        return {"input": self.input_dim, "hidden": list(self.hidden), "output": self.output_dim,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(d["input"], tuple(d["hidden"]), d["output"], d.get("activation", "sigmoid"))


def param_count(arch: MlpArchitecture) -> int:
    return arch.param_count


@dataclass(frozen=True)
class MlpModel:
    arch: MlpArchitecture
    params: np.ndarray

    def __post_init__(self):
        p = np.array(self.params, dtype=np.float64).reshape(-1)
        if p.size != self.arch.param_count:
            raise ArityMismatch(f"architecture needs {self.arch.param_count} parameters, got {p.size}")
        p.setflags(write=False)
        object.__setattr__(self, "params", p)

    def with_params(self, params) -> "MlpModel":
        return MlpModel(self.arch, params)


def init_params(arch: MlpArchitecture, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in arch.layer_dims:
        r = math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-r, r, size=fan_out * fan_in))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def mlp_apply(arch: MlpArchitecture, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Batched forward pass on tensors: ``x`` is ``(N, input_dim)``, result ``(N, output_dim)``.

    Layer ``l`` stores its weight as an ``(out, in)`` row-major block followed
    by its bias; hidden layers apply the activation, the last layer is affine.
    """
    act = ACTIVATIONS[arch.activation]
    offset = 0
    h = x
    layers = arch.layer_dims
    for k, (fan_in, fan_out) in enumerate(layers):
        W = params[offset:offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = params[offset:offset + fan_out]
        offset += fan_out
        h = h @ W.T + b
        if k < len(layers) - 1:
            h = act(h)
    return h


def mlp_forward(m: MlpModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.arch.input_dim:
        raise ArityMismatch(f"network expects {m.arch.input_dim} inputs, got {x.shape[-1]}")
    single = x.ndim == 1
    out = mlp_apply(m.arch, as_tensor(m.params), as_tensor(np.atleast_2d(x))).numpy()
    return out[0] if single else out


# --------------------------------------------------------------------------
# skew matrices and the orthogonal exponential

def skew_size(n: int) -> int:
    return n * (n - 1) // 2


def _pairs(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def skew_from_coords(c, n: int | None = None) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if n is None:
        n = int(round((1 + math.sqrt(1 + 8 * c.size)) / 2))
    if c.size != skew_size(n):
        raise ArityMismatch(f"so({n}) needs {skew_size(n)} coordinates, got {c.size}")
    A = np.zeros((n, n))
    for k, (i, j) in enumerate(_pairs(n)):
        A[i, j] = c[k]
        A[j, i] = -c[k]
    return A


def skew_from_coords_t(c: torch.Tensor, n: int) -> torch.Tensor:
    """Batched ``(N, n(n-1)/2) -> (N, n, n)``."""
    N = c.shape[0]
    rows = []
    pairs = _pairs(n)
    index = {ij: k for k, ij in enumerate(pairs)}
    zero = torch.zeros(N, dtype=c.dtype)
    for i in range(n):
        row = []
        for j in range(n):
            if i < j:
                row.append(c[:, index[(i, j)]])
            elif i > j:
                row.append(-c[:, index[(j, i)]])
            else:
                row.append(zero)
        rows.append(torch.stack(row, dim=-1))
    return torch.stack(rows, dim=-2)


def orthogonal_exp(A) -> np.ndarray:
    """Matrix exponential of a skew matrix (a rotation)."""
    A = np.asarray(A, dtype=np.float64)
    return orthogonal_exp_t(torch.as_tensor(A)[None]).numpy()[0]


def _sinc_terms(theta2: torch.Tensor):
    """``sin(t)/t`` and ``(1 - cos t)/t**2`` as functions of ``t**2``, smooth at 0."""
    small = theta2 < 1e-6
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    t = torch.sqrt(safe2)
    a = torch.where(small, 1 - theta2 / 6 + theta2 * theta2 / 120, torch.sin(t) / t)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2 * theta2 / 720, (1 - torch.cos(t)) / safe2)
    return a, b


def orthogonal_exp_t(A: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable ``exp`` of skew matrices ``(N, n, n)``.

    Closed forms for ``n <= 3`` (Rodrigues for 3); scaling and squaring with a
    truncated Taylor series otherwise.
    """
    n = A.shape[-1]
    I = torch.eye(n, dtype=A.dtype).expand_as(A)
    if n == 1:
        return I + A * 0
    if n in (2, 3):
        theta2 = 0.5 * (A * A).sum(dim=(-2, -1))
        a, b = _sinc_terms(theta2)
        return I + a[:, None, None] * A + b[:, None, None] * (A @ A)
    norm = float(np.abs(A.detach().numpy()).sum(axis=-1).max()) if A.numel() else 0.0
    squarings = max(0, math.ceil(math.log2(norm)) + 1) if norm > 0.5 else 0
    X = A / (2 ** squarings)
    term = I
    out = I
    for k in range(1, 18):
        term = term @ X / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


# --------------------------------------------------------------------------
# dissipative force networks

@dataclass(frozen=True)
class DissipativeForceModel:
    """Network whose outputs parameterize ``F = -(Q diag(f^2) Q^T + A) v``.

    With ``antisymmetric=True`` an extra ``n(n-1)/2`` outputs build a skew
    matrix ``A``; it does not change ``F . v`` and is off by default.
    """

    net: MlpModel
    n: int
    antisymmetric: bool = False

    def __post_init__(self):
        want = self.output_dim(self.n, self.antisymmetric)
        if self.net.arch.output_dim != want:
            raise ArityMismatch(f"dissipative force in R^{self.n} needs {want} outputs, "
                                f"network has {self.net.arch.output_dim}")

    @staticmethod
    def output_dim(n: int, antisymmetric: bool = False) -> int:
        return n * (n + 1) // 2 + (skew_size(n) if antisymmetric else 0)


def dissipative_force_t(arch: MlpArchitecture, params: torch.Tensor, obs: torch.Tensor, v: torch.Tensor,
                        n: int, antisymmetric: bool = False) -> torch.Tensor:
    """Batched force ``(N, n)`` from network inputs ``obs`` ``(N, input_dim)`` and velocities ``v``."""
    out = mlp_apply(arch, params, obs)
    return force_from_outputs(out, v, n, antisymmetric)


def force_from_outputs(out: torch.Tensor, v: torch.Tensor, n: int, antisymmetric: bool = False) -> torch.Tensor:
    m = skew_size(n)
    fbar = out[:, m:m + n]
    if n == 1:
        return -(fbar * fbar) * v
    Q = orthogonal_exp_t(skew_from_coords_t(out[:, :m], n))
    # Q diag(f^2) Q^T v, evaluated right to left
    w = (Q.transpose(-1, -2) @ v.unsqueeze(-1)).squeeze(-1)
    F = -(Q @ (fbar * fbar * w).unsqueeze(-1)).squeeze(-1)
    if antisymmetric:
        A = skew_from_coords_t(out[:, m + n:], n)
        F = F - (A @ v.unsqueeze(-1)).squeeze(-1)
    return F


def dissipative_force(m: DissipativeForceModel, obs, v) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if obs.shape[-1] != m.net.arch.input_dim:
        raise ArityMismatch(f"force network expects {m.net.arch.input_dim} inputs, got {obs.shape[-1]}")
    if v.shape[-1] != m.n:
        raise ArityMismatch(f"velocity must have {m.n} entries, got {v.shape[-1]}")
    single = obs.ndim == 1
    F = dissipative_force_t(m.net.arch, as_tensor(m.net.params), as_tensor(np.atleast_2d(obs)),
                            as_tensor(np.atleast_2d(v)), m.n, m.antisymmetric).numpy()
    return F[0] if single else F


def dissipation_matrix(m: DissipativeForceModel, obs) -> np.ndarray:
    """The symmetric factor ``Q diag(f^2) Q^T`` at one input point."""
    out = mlp_forward(m.net, obs)
    k = skew_size(m.n)
    Q = orthogonal_exp(skew_from_coords(out[:k], m.n))
    return Q @ np.diag(out[k:k + m.n] ** 2) @ Q.T


# --------------------------------------------------------------------------
# model files

KINDS = ("scalar_G", "dissipative_force", "raw_force")


def save_model(path, model, kind: str | None = None, extra: dict | None = None) -> Path:
    if isinstance(model, DissipativeForceModel):
        kind = kind or "dissipative_force"
        net = model.net
        payload_extra = {"n": model.n, "antisymmetric": model.antisymmetric}
    else:
        kind = kind or "scalar_G"
        net = model
        payload_extra = {}
    if kind not in KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    payload = {"kind": kind, "arch": net.arch.to_dict(), "params": [float(x) for x in net.params]}
    payload.update(payload_extra)
    payload.update(extra or {})
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1) + "\n")
    return path


def load_model(path):
    payload = json.loads(Path(path).read_text())
    net = MlpModel(MlpArchitecture.from_dict(payload["arch"]), payload["params"])
    if payload["kind"] == "dissipative_force":
        return DissipativeForceModel(net, int(payload["n"]), bool(payload.get("antisymmetric", False)))
    return net


def model_kind(path) -> str:
    return json.loads(Path(path).read_text())["kind"]
