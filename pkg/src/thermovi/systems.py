"""Ground-truth physics for the two example systems and a reference ODE solver.

Adiabatic piston
    Two ideal-gas chambers separated by a piston at ``x``. Chamber volumes are
    ``V1 = A1 (L + x)`` and ``V2 = A2 (L - x)``; each gas follows the
    Sackur-Tetrode law ``U = (c V)^(-2/3) exp(S / NkB)`` so that, with
    ``NkB = 1``, the chamber temperature equals its internal energy. Each
    chamber exerts a friction ``F_i = -lambda_i v`` with
    ``lambda_i = nu_i + kappa_i v^2 (1 + 0.1 T_i^2)``.

    Chamber areas default to ``A1 = 1, A2 = 2``: the only assignment that
    reproduces the validation temperatures ``{0.793, 0.895}`` at
    ``x = 0.5, S1 = S2 = 0.5``.

Rigid body with friction
    Body angular momentum ``mu``, one entropy ``S``,
    ``H = exp(gamma S) (mu . I^-1 mu / 2 + U0)`` and
    ``f = -nu0 Omega - nu1 A^T tanh(A Omega)``. The factor ``1/2`` and
    ``U0 = 1`` are required by the validation point ``Omega = (0.5, -0.25,
    -0.1667)``, ``T = 1.229``. Dynamics (left-invariant, body frame)::

        dmu/dt = mu x Omega + f,    T dS/dt = -Omega . f,    T = gamma H

Every temperature stays at ``gamma H``, which is conserved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch
from scipy.integrate import solve_ivp

from .autodiff import as_tensor
from .core import (
    ObservableState,
    PhaseState,
    ReducedObservable,
    ReducedPhase,
    observables_from_phase_batch,
    reduced_observables_batch,
)
from .errors import (
    ConfigError,
    NonpositiveVolume,
    OutsidePhysicalDomain,
    PistonOutOfRange,
    StepSizeUnderflow,
)


def sackur_tetrode_U(S, V, NkB: float = 1.0, c_hat: float = 1.0):
    """Ideal-gas internal energy ``(c_hat V)^(-2/3) exp(S / NkB)``."""
    V = np.asarray(V, dtype=np.float64)
    if np.any(V <= 0):
        raise NonpositiveVolume(f"volume must be positive, got {V}")
    out = (c_hat * V) ** (-2.0 / 3.0) * np.exp(np.asarray(S, dtype=np.float64) / NkB)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# piston

@dataclass(frozen=True)
class PistonParams:
    m: float = 1.0
    A1: float = 1.0
    A2: float = 2.0
    L: float = 2.0
    NkB: float = 1.0
    c_hat: float = 1.0
    nu: tuple[float, float] = (0.02, 0.04)
    kappa: tuple[float, float] = (2.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "nu", tuple(float(x) for x in self.nu))
        object.__setattr__(self, "kappa", tuple(float(x) for x in self.kappa))
        scalars = (self.m, self.A1, self.A2, self.L, self.NkB, self.c_hat)
        if min(scalars) <= 0 or min(self.nu + self.kappa) <= 0:
            raise ConfigError("piston parameters must all be positive")


class Piston:
    """Adiabatic piston: ``q = (x,)``, two entropies/temperatures."""

    name = "piston"
    kind = "thermal"
    n_q = 1
    n_T = 2

    def __init__(self, params: PistonParams | None = None):
        self.params = params or PistonParams()

    def _volumes_t(self, x):
        P = self.params
        xd = x.detach()
        if torch.any(xd * xd >= P.L * P.L):
            raise PistonOutOfRange(f"piston position must satisfy |x| < L = {P.L}")
        return P.A1 * (P.L + x), P.A2 * (P.L - x)

    def _energy_t(self, S, V):
        P = self.params
        return (P.c_hat * V) ** (-2.0 / 3.0) * torch.exp(S / P.NkB)

    # torch fields, batched over rows

    def hamiltonian(self, q, p, S):
        V1, V2 = self._volumes_t(q[:, 0])
        return (p[:, 0] ** 2 / (2 * self.params.m) + self._energy_t(S[:, 0], V1) + self._energy_t(S[:, 1], V2))

    def G(self, q, v, T):
        """Thermal Lagrangian ``m v^2/2 + sum_i T_i (NkB log(T_i (c V_i)^(2/3) / NkB) - NkB)``."""
        P = self.params
        V1, V2 = self._volumes_t(q[:, 0])
        out = 0.5 * P.m * v[:, 0] ** 2
        for Ti, Vi in ((T[:, 0], V1), (T[:, 1], V2)):
            S = P.NkB * torch.log(Ti * (P.c_hat * Vi) ** (2.0 / 3.0) / P.NkB)
            out = out + Ti * S - Ti * P.NkB
        return out

    def forces(self, q, v, T):
        """Friction channels, shape ``(N, 2, 1)``."""
        lam = self.friction_coefficients(v[:, 0], T)
        return (-lam * v[:, :1]).unsqueeze(-1)

    def friction_coefficients(self, v, T):
        P = self.params
        nu = torch.as_tensor(P.nu, dtype=T.dtype)
        kappa = torch.as_tensor(P.kappa, dtype=T.dtype)
        return nu + kappa * (v * v)[:, None] * (1 + 0.1 * T * T)

    # numpy right-hand side for the reference solver; y = (x, p, S1, S2)

    def rhs(self, t, y):
        P = self.params
        x, p, S1, S2 = y
        if abs(x) >= P.L:
            raise PistonOutOfRange(f"piston reached |x| >= L at t={t}: x={x}")
        V1, V2 = P.A1 * (P.L + x), P.A2 * (P.L - x)
        T1 = sackur_tetrode_U(S1, V1, P.NkB, P.c_hat) / P.NkB
        T2 = sackur_tetrode_U(S2, V2, P.NkB, P.c_hat) / P.NkB
        v = p / P.m
        conservative = (2.0 / 3.0) * (T1 * P.NkB * P.A1 / V1 - T2 * P.NkB * P.A2 / V2)
        lam1 = P.nu[0] + P.kappa[0] * v * v * (1 + 0.1 * T1 * T1)
        lam2 = P.nu[1] + P.kappa[1] * v * v * (1 + 0.1 * T2 * T2)
        return np.array([v, conservative - (lam1 + lam2) * v, lam1 * v * v / T1, lam2 * v * v / T2])

    def pack(self, s: PhaseState) -> np.ndarray:
        return s.as_array()

    def unpack(self, y) -> PhaseState:
        return PhaseState(y[:1], y[1:2], y[2:4])

    def observables(self, Y: np.ndarray) -> np.ndarray:
        """Rows of ``(x, p, S1, S2)`` to rows of ``(x, v, T1, T2)``."""
        Y = np.atleast_2d(Y)
        v, T = observables_from_phase_batch(self.hamiltonian, Y[:, :1], Y[:, 1:2], Y[:, 2:4])
        return np.hstack([Y[:, :1], v, T])

    def observable(self, s: PhaseState) -> ObservableState:
        row = self.observables(s.as_array())[0]
        return ObservableState(row[:1], row[1:2], row[2:4])

    def phase_from_observable(self, obs: ObservableState) -> PhaseState:
        """Invert the Legendre map with the closed forms ``p = m v``, ``S = dG/dT``."""
        P = self.params
        x = obs.q[0]
        if abs(x) >= P.L:
            raise PistonOutOfRange(f"piston position must satisfy |x| < L = {P.L}, got {x}")
        V = np.array([P.A1 * (P.L + x), P.A2 * (P.L - x)])
        S = P.NkB * np.log(obs.T * (P.c_hat * V) ** (2.0 / 3.0) / P.NkB)
        return PhaseState(obs.q, P.m * obs.v, S)

    def sample_phase(self, rng: np.random.Generator, box=None) -> PhaseState:
        box = box or {"q": (-1.0, 1.0), "p": (-1.0, 1.0), "S": (0.0, 1.0)}
        return PhaseState(rng.uniform(*box["q"], size=1), rng.uniform(*box["p"], size=1),
                          rng.uniform(*box["S"], size=2))

    def validation_phase(self) -> PhaseState:
        return PhaseState([0.5], [-0.5], [0.5, 0.5])


def piston_hamiltonian(pp: PistonParams, s: PhaseState) -> float:
    sys = Piston(pp)
    return float(sys.hamiltonian(as_tensor(s.q[None]), as_tensor(s.p[None]), as_tensor(s.S[None]))[0])


def piston_forces(pp: PistonParams, obs: ObservableState) -> np.ndarray:
    """Friction channels ``(2, 1)``; each satisfies ``F_i . v <= 0``."""
    if abs(obs.q[0]) >= pp.L:
        raise PistonOutOfRange(f"|x| must be < L = {pp.L}")
    sys = Piston(pp)
    return sys.forces(as_tensor(obs.q[None]), as_tensor(obs.v[None]), as_tensor(obs.T[None])).numpy()[0]


def piston_G(pp: PistonParams, obs: ObservableState) -> float:
    sys = Piston(pp)
    return float(sys.G(as_tensor(obs.q[None]), as_tensor(obs.v[None]), as_tensor(obs.T[None]))[0])


# --------------------------------------------------------------------------
# rigid body

MIXING = ((1.0, 0.5, 0.5), (0.5, 1.0, 0.5), (0.5, 0.5, 1.0))


@dataclass(frozen=True)
class RigidBodyParams:
    inertia: tuple[float, float, float] = (1.0, 2.0, 3.0)
    gamma: float = 1.0
    U0: float = 1.0
    nu0: float = 0.01
    nu1: float = 0.01
    Amix: tuple = field(default=MIXING)

    def __post_init__(self):
        object.__setattr__(self, "inertia", tuple(float(x) for x in self.inertia))
        object.__setattr__(self, "Amix", tuple(tuple(float(x) for x in row) for row in self.Amix))
        A = np.array(self.Amix)
        if A.shape != (3, 3) or not np.allclose(A, A.T):
            raise ConfigError("Amix must be a symmetric 3x3 matrix")
        if min(self.inertia) <= 0 or self.gamma <= 0 or self.U0 <= 0:
            raise ConfigError("inertia, gamma and U0 must be positive")


class RigidBody:
    """Free rigid body with internal friction, reduced to ``(mu, S)``."""

    name = "rigid_body"
    kind = "so3"
    n_q = 3
    n_T = 1

    def __init__(self, params: RigidBodyParams | None = None):
        self.params = params or RigidBodyParams()
        self._I = np.array(self.params.inertia)
        self._A = np.array(self.params.Amix)

    def hamiltonian(self, mu, S):
        P = self.params
        Iinv = torch.as_tensor(1.0 / self._I, dtype=mu.dtype)
        return torch.exp(P.gamma * S[:, 0]) * (0.5 * (mu * mu * Iinv).sum(-1) + P.U0)

    def entropy(self, Omega, T):
        """``S(Omega, T)`` from the ``+`` root of ``U0 z^2 - (T/gamma) z + (I Omega . Omega)/2 = 0``, ``z = e^(gamma S)``."""
        P = self.params
        w = (Omega * Omega * torch.as_tensor(self._I, dtype=Omega.dtype)).sum(-1)
        Tg = T[:, 0] / P.gamma
        disc = Tg * Tg - 2 * P.U0 * w
        if torch.any(disc.detach() < 0):
            raise OutsidePhysicalDomain("no entropy reproduces this (Omega, T): T^2/gamma^2 < 2 U0 I Omega.Omega")
        z = (Tg + torch.sqrt(disc)) / (2 * P.U0)
        return torch.log(z) / P.gamma, z, w

    def G(self, Omega, T):
        """``G = mu . Omega + T S - H`` with ``mu = e^(-gamma S) I Omega`` and ``H = T / gamma``."""
        P = self.params
        S, z, w = self.entropy(Omega, T)
        return w / z + T[:, 0] * S - T[:, 0] / P.gamma

    def forces(self, Omega, T):
        P = self.params
        A = torch.as_tensor(self._A, dtype=Omega.dtype)
        return -P.nu0 * Omega - P.nu1 * torch.tanh(Omega @ A.T) @ A

    def rayleigh(self, Omega):
        """``R = sum_j log cosh((A Omega)_j)``; its gradient is ``A^T tanh(A Omega)``."""
        return np.sum(np.log(np.cosh(self._A @ Omega)))

    def rhs(self, t, y):
        P = self.params
        mu, S = y[:3], y[3]
        z = math.exp(P.gamma * S)
        Omega = z * mu / self._I
        T = P.gamma * z * (0.5 * np.dot(mu, mu / self._I) + P.U0)
        f = -P.nu0 * Omega - P.nu1 * self._A.T @ np.tanh(self._A @ Omega)
        return np.append(np.cross(mu, Omega) + f, -np.dot(Omega, f) / T)

    def pack(self, s: ReducedPhase) -> np.ndarray:
        return s.as_array()

    def unpack(self, y) -> ReducedPhase:
        return ReducedPhase(y[:3], y[3])

    def observables(self, Y: np.ndarray) -> np.ndarray:
        Y = np.atleast_2d(Y)
        Omega, T = reduced_observables_batch(self.hamiltonian, Y[:, :3], Y[:, 3:4])
        return np.hstack([Omega, T])

    def observable(self, s: ReducedPhase) -> ReducedObservable:
        row = self.observables(s.as_array())[0]
        return ReducedObservable(row[:3], row[3])

    def phase_from_observable(self, obs: ReducedObservable) -> ReducedPhase:
        S, z, _ = self.entropy(as_tensor(obs.Omega[None]), as_tensor([[obs.T]]))
        return ReducedPhase(self._I * obs.Omega / float(z[0]), float(S[0]))

    def sample_phase(self, rng: np.random.Generator, box=None) -> ReducedPhase:
        box = box or {"mu": (-1.0, 1.0), "S": (0.0, 1.0)}
        return ReducedPhase(rng.uniform(*box["mu"], size=3), rng.uniform(*box["S"]))

    def validation_phase(self) -> ReducedPhase:
        return ReducedPhase([0.5, -0.5, -0.5], 0.0)


def rigid_hamiltonian(rp: RigidBodyParams, mu, S) -> float:
    return float(RigidBody(rp).hamiltonian(as_tensor(np.asarray(mu)[None]), as_tensor([[S]]))[0])


def rigid_friction(rp: RigidBodyParams, Omega, T=None) -> np.ndarray:
    return RigidBody(rp).forces(as_tensor(np.asarray(Omega)[None]), None).numpy()[0]


def entropy_from_OmegaT(rp: RigidBodyParams, Omega, T) -> float:
    S, _, _ = RigidBody(rp).entropy(as_tensor(np.asarray(Omega)[None]), as_tensor([[T]]))
    return float(S[0])


def rigid_G_closed_form(rp: RigidBodyParams, Omega, T) -> float:
    return float(RigidBody(rp).G(as_tensor(np.asarray(Omega)[None]), as_tensor([[T]]))[0])


# --------------------------------------------------------------------------
# registry and reference integration

SYSTEMS = {"piston": (Piston, PistonParams), "rigid_body": (RigidBody, RigidBodyParams)}


def make_system(name: str, overrides: dict | None = None):
    """Build a system by name; ``overrides`` maps parameter field names to values."""
    try:
        cls, params_cls = SYSTEMS[name]
    except KeyError:
        raise ConfigError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    overrides = dict(overrides or {})
    known = {f.name for f in fields(params_cls)}
    unknown = set(overrides) - known
    if unknown:
        raise ConfigError(f"unknown {name} parameters: {sorted(unknown)}")
    return cls(replace(params_cls(), **overrides))


def reference_integrate(system, y0, t_grid, tol=(1e-10, 1e-12), method: str = "DOP853") -> list:
    """Integrate the continuous phase-space equations and sample at ``t_grid``.

    ``y0`` is a :class:`PhaseState` (piston) or :class:`ReducedPhase`
    (rigid body). Returns states of the same type, one per grid time.
    """
    Y = reference_integrate_array(system, system.pack(y0), t_grid, tol, method)
    return [system.unpack(y) for y in Y]


def reference_integrate_array(system, y0, t_grid, tol=(1e-10, 1e-12), method: str = "DOP853") -> np.ndarray:
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if t_grid.ndim != 1 or len(t_grid) < 1 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    rtol, atol = tol
    if rtol <= 0 or atol <= 0:
        raise ValueError("tolerances must be positive")
    if len(t_grid) == 1:
        return np.asarray(y0, dtype=np.float64)[None].copy()
    sol = solve_ivp(system.rhs, (t_grid[0], t_grid[-1]), np.asarray(y0, dtype=np.float64), method=method,
                    t_eval=t_grid, rtol=rtol, atol=atol)
    if sol.status != 0 or sol.y.shape[1] != len(t_grid):
        raise StepSizeUnderflow(f"reference integration failed from y0={list(y0)}: {sol.message}")
    return sol.y.T.copy()
