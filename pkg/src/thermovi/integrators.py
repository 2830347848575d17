"""Discrete variational integrators in observable variables.

Model fields are plain torch callables over batched float64 tensors:

* thermal ``G(q, v, T) -> (N,)`` with ``q, v: (N, n)`` and ``T: (N, P)``;
* thermal forces ``F(q, v, T) -> (N, P, n)``, one channel per entropy;
* reduced ``G(Omega, T) -> (N,)`` with ``Omega: (N, 3)``, ``T: (N, 1)``;
* reduced friction ``f(Omega, T) -> (N, 3)``.

``None`` stands for a zero force. The residual functions are the single
source of truth: Newton steps drive them to zero, training losses square
them.

Thermal scheme, pair ``a -> b`` with step ``h``::

    r_vel   = (q_b - q_a)/h - v_a
    r_mom   = (dG/dv|_b - dG/dv|_a)/h - dG/dq|_b - sum_i F_i|_b
    r_ent_i = (T_i,a / h)(dG/dT_i|_b - dG/dT_i|_a) + F_i|_a . v_a

SO(3) scheme, ``mu = dG/dOmega``, Cayley retraction::

    r_mom = (mu_b - mu_a)/h - (mu_b x Omega_b + mu_a x Omega_a)/2
            - (h/4)((mu_b . Omega_b) Omega_b - (mu_a . Omega_a) Omega_a) - f_b
    r_ent = (dG/dT|_b - dG/dT|_a)/h + Omega_a . f_a / T_a

Its continuum limit is ``dmu/dt = mu x Omega + f``, ``T dS/dt = -Omega . f``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .autodiff import as_tensor, input_gradients
from .core import ObservableState, PhaseState, ReducedObservable
from .errors import NewtonDiverged, NonpositiveTemperature, NotSkew, OutsidePhysicalDomain, PistonOutOfRange

GField = Callable[..., torch.Tensor]
ForceField = Callable[..., torch.Tensor]

NEWTON_TOL = 1e-11
MAX_ITER = 50
MAX_HALVINGS = 20
FD_STEP = 1e-7


@dataclass(frozen=True)
class ResidualReport:
    r_momentum: np.ndarray
    r_entropy: np.ndarray
    r_velocity: np.ndarray

    def max_abs(self) -> float:
        return float(max(np.abs(self.r_momentum).max(), np.abs(self.r_entropy).max(),
                         np.abs(self.r_velocity).max()))


@dataclass(frozen=True)
class SchemeOptions:
    """``velocity``: ``"state"`` uses ``v_a`` in the entropy line, ``"difference"`` uses ``(q_b - q_a)/h``."""

    force_midpoint: bool = False
    velocity: str = "state"

    def __post_init__(self):
        if self.velocity not in ("state", "difference"):
            raise ValueError(f"velocity must be 'state' or 'difference', got {self.velocity!r}")


DEFAULT_OPTIONS = SchemeOptions()


# --------------------------------------------------------------------------
# hat / vee

def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(A, tol: float = 1e-12) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (3, 3) or np.abs(A + A.T).max() > tol:
        raise NotSkew("vee needs an antisymmetric 3x3 matrix")
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


# --------------------------------------------------------------------------
# batched residuals (torch)

def _zero_forces(q, P):
    return q.new_zeros((q.shape[0], P, q.shape[1]))


def thermal_residuals_t(G: GField, F: ForceField | None, a: torch.Tensor, b: torch.Tensor, h: torch.Tensor,
                        n: int, create_graph: bool = False, options: SchemeOptions = DEFAULT_OPTIONS):
    """Residual rows for pairs ``a -> b``; rows are ``(q, v, T)``. Returns ``(r_mom, r_ent, r_vel)``."""
    N = a.shape[0]
    X = torch.cat([a, b]).detach().requires_grad_(True)
    q, v, T = X[:, :n], X[:, n:2 * n], X[:, 2 * n:]
    P = T.shape[1]
    gq, gv, gT = input_gradients(G(q, v, T), [X], create_graph=create_graph)[0].split([n, n, P], dim=1)
    if F is None:
        forces = _zero_forces(q, P)
    else:
        forces = F(q, v, T)
    Fa, Fb = forces[:N], forces[N:]
    qa, va, Ta = a[:, :n], a[:, n:2 * n], a[:, 2 * n:]
    qb = b[:, :n]
    hh = h[:, None]
    r_vel = (qb - qa) / hh - va
    vk = (qb - qa) / hh if options.velocity == "difference" else va
    if options.force_midpoint:
        Fmom = 0.5 * (Fa + Fb)
        Fent = Fmom
    else:
        Fmom, Fent = Fb, Fa
    r_mom = (gv[N:] - gv[:N]) / hh - gq[N:] - Fmom.sum(1)
    r_ent = Ta / hh * (gT[N:] - gT[:N]) + (Fent * vk[:, None, :]).sum(-1)
    return r_mom, r_ent, r_vel


def _cross(a, b):
    a1, a2, a3 = a.unbind(-1)
    b1, b2, b3 = b.unbind(-1)
    return torch.stack([a2 * b3 - a3 * b2, a3 * b1 - a1 * b3, a1 * b2 - a2 * b1], dim=-1)


def so3_residuals_t(G: GField, f: ForceField | None, a: torch.Tensor, b: torch.Tensor, h: torch.Tensor,
                    create_graph: bool = False, options: SchemeOptions = DEFAULT_OPTIONS):
    """Residual rows for reduced pairs; rows are ``(Omega, T)``. Returns ``(r_mom, r_ent, r_vel)``."""
    N = a.shape[0]
    X = torch.cat([a, b]).detach().requires_grad_(True)
    Om, T = X[:, :3], X[:, 3:]
    mu, gT = input_gradients(G(Om, T), [X], create_graph=create_graph)[0].split([3, 1], dim=1)
    fr = Om.new_zeros(Om.shape) if f is None else f(Om, T)
    Oa = a[:, :3]
    hh = h[:, None]
    c = _cross(mu, Om)
    # (hat(x) hat(mu) hat(x))^vee = -(mu . x) x
    w = (mu * Om).sum(-1, keepdim=True) * Om
    fmom = 0.5 * (fr[:N] + fr[N:]) if options.force_midpoint else fr[N:]
    fent = 0.5 * (fr[:N] + fr[N:]) if options.force_midpoint else fr[:N]
    r_mom = (mu[N:] - mu[:N]) / hh - 0.5 * (c[N:] + c[:N]) - 0.25 * hh * (w[N:] - w[:N]) - fmom
    r_ent = (gT[N:] - gT[:N]) / hh + (Oa * fent).sum(-1, keepdim=True) / a[:, 3:]
    return r_mom, r_ent, torch.zeros_like(Oa)


def _check_temperature(T, where):
    if np.any(np.asarray(T) <= 0):
        raise NonpositiveTemperature(f"temperature at {where} must be positive")


def residuals_thermal(G: GField, F: ForceField | None, a: ObservableState, b: ObservableState, h: float,
                      options: SchemeOptions = DEFAULT_OPTIONS) -> ResidualReport:
    if not h > 0:
        raise ValueError("h must be positive")
    _check_temperature(a.T, "a")
    _check_temperature(b.T, "b")
    r = thermal_residuals_t(G, F, as_tensor(a.as_array()[None]), as_tensor(b.as_array()[None]),
                            as_tensor([h]), a.q.size, options=options)
    return ResidualReport(*(x.detach().numpy()[0] for x in r))


def residuals_so3(G: GField, f: ForceField | None, a: ReducedObservable, b: ReducedObservable, h: float,
                  options: SchemeOptions = DEFAULT_OPTIONS) -> ResidualReport:
    if not h > 0:
        raise ValueError("h must be positive")
    _check_temperature(a.T, "a")
    _check_temperature(b.T, "b")
    r = so3_residuals_t(G, f, as_tensor(a.as_array()[None]), as_tensor(b.as_array()[None]), as_tensor([h]),
                        options=options)
    return ResidualReport(*(x.detach().numpy()[0] for x in r))


# --------------------------------------------------------------------------
# Newton solver

def newton_solve(residual: Callable[[np.ndarray], np.ndarray], x0, positive=None, tol: float = NEWTON_TOL,
                 max_iter: int = MAX_ITER, step: int | None = None) -> np.ndarray:
    """Solve ``residual(x) = 0``.

    ``residual`` maps a batch of candidates ``(M, d)`` to residual rows
    ``(M, d)``; non-finite rows mark candidates outside the domain. The
    Jacobian is a central difference evaluated in one batched call.
    ``positive`` is a boolean mask of entries that must stay > 0.
    """
    x = np.array(x0, dtype=np.float64)
    d = x.size
    positive = np.zeros(d, bool) if positive is None else np.asarray(positive)

    def norm(r):
        return np.inf if not np.all(np.isfinite(r)) else np.abs(r).max()

    r = residual(x[None])[0]
    best = norm(r)
    for _ in range(max_iter):
        if best < tol:
            return x
        eps = FD_STEP * np.maximum(1.0, np.abs(x))
        E = np.diag(eps)
        R = residual(np.concatenate([x + E, x - E]))
        J = (R[:d] - R[d:]).T / (2 * eps)
        try:
            dx = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        t = 1.0
        for _ in range(MAX_HALVINGS + 1):
            cand = x + t * dx
            if not np.any(cand[positive] <= 0):
                rc = residual(cand[None])[0]
                if norm(rc) < best:
                    x, r, best = cand, rc, norm(rc)
                    break
            t *= 0.5
        else:
            break
    if best < tol:
        return x
    raise NewtonDiverged(f"Newton did not converge: |r|_inf = {best:.3e} after {max_iter} iterations",
                         residual=best, step=step)


def _domain_safe(fun):
    """Map domain errors in a batched residual to non-finite rows."""
    def wrapped(X):
        try:
            return fun(X)
        except (OutsidePhysicalDomain, NonpositiveTemperature):
            if len(X) == 1:
                return np.full_like(X, np.inf)
            return np.concatenate([wrapped(X[i:i + 1]) for i in range(len(X))])
    return wrapped


def step_thermal_array(G, F, a: np.ndarray, h: float, n: int, tol=NEWTON_TOL, max_iter=MAX_ITER,
                       options: SchemeOptions = DEFAULT_OPTIONS, step: int | None = None) -> np.ndarray:
    qb = a[:n] + h * a[n:2 * n]

    @_domain_safe
    def residual(X):
        M = len(X)
        B = np.hstack([np.repeat(qb[None], M, 0), X])
        rm, re, _ = thermal_residuals_t(G, F, as_tensor(np.repeat(a[None], M, 0)), as_tensor(B),
                                        as_tensor(np.full(M, h)), n, options=options)
        return np.hstack([rm.detach().numpy(), re.detach().numpy()])

    positive = np.arange(a.size - n) >= n
    x = newton_solve(residual, a[n:], positive, tol, max_iter, step)
    return np.concatenate([qb, x])


def step_thermal(G: GField, F: ForceField | None, a: ObservableState, h: float, tol: float = NEWTON_TOL,
                 max_iter: int = MAX_ITER, options: SchemeOptions = DEFAULT_OPTIONS) -> ObservableState:
    if not h > 0:
        raise ValueError("h must be positive")
    n = a.q.size
    b = step_thermal_array(G, F, a.as_array(), h, n, tol, max_iter, options)
    return ObservableState(b[:n], b[n:2 * n], b[2 * n:])


def step_so3_array(G, f, a: np.ndarray, h: float, tol=NEWTON_TOL, max_iter=MAX_ITER,
                   options: SchemeOptions = DEFAULT_OPTIONS, step: int | None = None) -> np.ndarray:
    @_domain_safe
    def residual(X):
        M = len(X)
        rm, re, _ = so3_residuals_t(G, f, as_tensor(np.repeat(a[None], M, 0)), as_tensor(X),
                                    as_tensor(np.full(M, h)), options=options)
        return np.hstack([rm.detach().numpy(), re.detach().numpy()])

    return newton_solve(residual, a, np.array([False, False, False, True]), tol, max_iter, step)


def step_so3(G: GField, f: ForceField | None, a: ReducedObservable, h: float, tol: float = NEWTON_TOL,
             max_iter: int = MAX_ITER, options: SchemeOptions = DEFAULT_OPTIONS) -> ReducedObservable:
    if not h > 0:
        raise ValueError("h must be positive")
    b = step_so3_array(G, f, a.as_array(), h, tol, max_iter, options)
    return ReducedObservable(b[:3], b[3])


def step_canonical(H: Callable, F: ForceField | None, a: PhaseState, h: float, tol: float = NEWTON_TOL,
                   max_iter: int = MAX_ITER) -> PhaseState:
    """Phase-space scheme, implicit in ``p_{k+1}`` only.

    ``v_k`` and ``T_k`` are ``dH/dp`` and ``dH/dS`` at ``(q_k, p_{k+1}, S_k)``;
    forces are evaluated at ``(q_k, v_k, T_k)``.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    n, P = a.q.size, a.S.size
    q, p, S = a.q, a.p, a.S

    def derivatives(Pn):
        M = len(Pn)
        qt = as_tensor(np.repeat(q[None], M, 0), requires_grad=True)
        pt = as_tensor(Pn, requires_grad=True)
        St = as_tensor(np.repeat(S[None], M, 0), requires_grad=True)
        gq, v, T = input_gradients(H(qt, pt, St), [qt, pt, St], create_graph=False)
        frc = _zero_forces(qt, P) if F is None else F(qt.detach(), v, T)
        return gq.detach(), v.detach(), T.detach(), frc.detach()

    def residual(Pn):
        gq, _, T, frc = derivatives(Pn)
        r = (Pn - p) / h + gq.numpy() - frc.sum(1).numpy()
        r[np.any(T.numpy() <= 0, axis=1)] = np.inf
        return r

    p1 = newton_solve(residual, p, None, tol, max_iter)
    _, v, T, frc = derivatives(p1[None])
    v, T, frc = v.numpy()[0], T.numpy()[0], frc.numpy()[0]
    if np.any(T <= 0):
        raise NonpositiveTemperature("dH/dS must stay positive")
    S1 = S - h * (frc @ v) / T
    return PhaseState(q + h * v, p1, S1)


# --------------------------------------------------------------------------
# energy, momenta, entropies

def thermal_conjugates(G: GField, rows: np.ndarray, n: int):
    """Return ``(E, p, S)`` for observable rows: ``p = dG/dv``, ``S = dG/dT``, ``E = p.v + T.S - G``."""
    X = as_tensor(np.atleast_2d(rows), requires_grad=True)
    q, v, T = X[:, :n], X[:, n:2 * n], X[:, 2 * n:]
    g = G(q, v, T)
    (grad,) = input_gradients(g, [X], create_graph=False)
    grad = grad.detach().numpy()
    p, S = grad[:, n:2 * n], grad[:, 2 * n:]
    rows = X.detach().numpy()
    E = (p * rows[:, n:2 * n]).sum(1) + (S * rows[:, 2 * n:]).sum(1) - g.detach().numpy()
    return E, p, S


def so3_conjugates(G: GField, rows: np.ndarray):
    """Return ``(E, mu, S)`` for reduced rows ``(Omega, T)``."""
    X = as_tensor(np.atleast_2d(rows), requires_grad=True)
    g = G(X[:, :3], X[:, 3:])
    (grad,) = input_gradients(g, [X], create_graph=False)
    grad = grad.detach().numpy()
    rows = X.detach().numpy()
    mu, S = grad[:, :3], grad[:, 3:]
    E = (mu * rows[:, :3]).sum(1) + (S * rows[:, 3:]).sum(1) - g.detach().numpy()
    return E, mu, S


def energy_thermal(G: GField, obs: ObservableState) -> float:
    return float(thermal_conjugates(G, obs.as_array(), obs.q.size)[0][0])


def energy_so3(G: GField, obs: ReducedObservable) -> float:
    return float(so3_conjugates(G, obs.as_array())[0][0])


# --------------------------------------------------------------------------
# rollouts

def simulate_thermal(G, F, a0: ObservableState | np.ndarray, h: float, steps: int, n: int | None = None,
                     tol=NEWTON_TOL, max_iter=MAX_ITER, options: SchemeOptions = DEFAULT_OPTIONS) -> np.ndarray:
    """Roll ``steps`` steps; returns ``(steps + 1, width)`` observable rows."""
    if isinstance(a0, ObservableState):
        n, a0 = a0.q.size, a0.as_array()
    out = [np.asarray(a0, dtype=np.float64)]
    for k in range(steps):
        try:
            out.append(step_thermal_array(G, F, out[-1], h, n, tol, max_iter, options, step=k + 1))
        except PistonOutOfRange as exc:
            raise PistonOutOfRange(f"step {k + 1}: {exc}") from exc
    return np.array(out)


def simulate_so3(G, f, a0: ReducedObservable | np.ndarray, h: float, steps: int, tol=NEWTON_TOL,
                 max_iter=MAX_ITER, options: SchemeOptions = DEFAULT_OPTIONS) -> np.ndarray:
    if isinstance(a0, ReducedObservable):
        a0 = a0.as_array()
    out = [np.asarray(a0, dtype=np.float64)]
    for k in range(steps):
        out.append(step_so3_array(G, f, out[-1], h, tol, max_iter, options, step=k + 1))
    return np.array(out)
