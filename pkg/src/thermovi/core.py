"""State types, trajectory datasets and the phase-to-observable map.

Observable states hold what can be measured (coordinates, velocities,
temperatures); phase states hold the canonical variables (coordinates,
momenta, entropies) and are only used to generate and validate data.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .autodiff import as_tensor, input_gradients
from .errors import ArityMismatch, NonpositiveTemperature


def _frozen_vector(x, name) -> np.ndarray:
    a = np.array(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries: {a}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PhaseState:
    q: np.ndarray
    p: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        for name in ("q", "p", "S"):
            object.__setattr__(self, name, _frozen_vector(getattr(self, name), name))
        if self.q.shape != self.p.shape:
            raise ArityMismatch(f"q has {self.q.size} entries but p has {self.p.size}")
        if self.S.size < 1:
            raise ArityMismatch("at least one entropy is required")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.p, self.S])


@dataclass(frozen=True)
class ObservableState:
    q: np.ndarray
    v: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        for name in ("q", "v", "T"):
            object.__setattr__(self, name, _frozen_vector(getattr(self, name), name))
        if self.q.shape != self.v.shape:
            raise ArityMismatch(f"q has {self.q.size} entries but v has {self.v.size}")
        if self.T.size < 1:
            raise ArityMismatch("at least one temperature is required")
        if np.any(self.T <= 0):
            raise NonpositiveTemperature(f"temperatures must be positive, got {self.T}")

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.v, self.T])


@dataclass(frozen=True)
class ReducedPhase:
    mu: np.ndarray
    S: float

    def __post_init__(self):
        object.__setattr__(self, "mu", _frozen_vector(self.mu, "mu"))
        if self.mu.size != 3:
            raise ArityMismatch("mu must have 3 entries")
        if not np.isfinite(self.S):
            raise ValueError("S must be finite")
        object.__setattr__(self, "S", float(self.S))

    def as_array(self) -> np.ndarray:
        return np.append(self.mu, self.S)


@dataclass(frozen=True)
class ReducedObservable:
    Omega: np.ndarray
    T: float

    def __post_init__(self):
        object.__setattr__(self, "Omega", _frozen_vector(self.Omega, "Omega"))
        if self.Omega.size != 3:
            raise ArityMismatch("Omega must have 3 entries")
        if not self.T > 0:
            raise NonpositiveTemperature(f"temperature must be positive, got {self.T}")
        object.__setattr__(self, "T", float(self.T))

    def as_array(self) -> np.ndarray:
        return np.append(self.Omega, self.T)


def observable_from_phase(H: Callable, s: PhaseState) -> ObservableState:
    """Map ``(q, p, S)`` to ``(q, dH/dp, dH/dS)``.

    ``H(q, p, S)`` takes batched float64 tensors of shape ``(N, n)`` and
    returns ``(N,)``. Derivatives come from autodiff, not differences.
    """
    v, T = observables_from_phase_batch(H, s.q[None], s.p[None], s.S[None])
    return ObservableState(s.q, v[0], T[0])


def observables_from_phase_batch(H: Callable, q, p, S) -> tuple[np.ndarray, np.ndarray]:
    qt = as_tensor(q)
    pt = as_tensor(p, requires_grad=True)
    St = as_tensor(S, requires_grad=True)
    v, T = input_gradients(H(qt, pt, St), [pt, St], create_graph=False)
    v, T = v.detach().numpy(), T.detach().numpy()
    if np.any(T <= 0):
        raise NonpositiveTemperature(f"dH/dS must be positive, got {T[T <= 0][:5]}")
    return v, T


def reduced_observable_from_phase(h: Callable, s: ReducedPhase) -> ReducedObservable:
    """Map ``(mu, S)`` to ``(dh/dmu, dh/dS)`` for a reduced Hamiltonian ``h(mu, S)``."""
    Omega, T = reduced_observables_batch(h, s.mu[None], np.array([[s.S]]))
    return ReducedObservable(Omega[0], T[0, 0])


def reduced_observables_batch(h: Callable, mu, S) -> tuple[np.ndarray, np.ndarray]:
    mut = as_tensor(mu, requires_grad=True)
    St = as_tensor(S, requires_grad=True)
    Omega, T = input_gradients(h(mut, St), [mut, St], create_graph=False)
    Omega, T = Omega.detach().numpy(), T.detach().numpy()
    if np.any(T <= 0):
        raise NonpositiveTemperature(f"dh/dS must be positive, got {T[T <= 0][:5]}")
    return Omega, T


# --------------------------------------------------------------------------
# datasets

THERMAL = "thermal"
SO3 = "so3"


@dataclass(frozen=True)
class TrajectoryDataset:
    """Observable start/end pairs separated by ``h``, grouped by trajectory.

    For ``kind == "thermal"`` each row of ``start``/``end`` is
    ``(q[n_q], v[n_q], T[n_T])``; for ``kind == "so3"`` it is
    ``(Omega[3], T)`` with ``n_q = 3`` and ``n_T = 1``. Rows are stored raw
    so that :func:`validate_dataset` can report bad entries instead of
    failing on construction.
    """

    kind: str
    n_q: int
    n_T: int
    start: np.ndarray
    end: np.ndarray
    h: np.ndarray
    traj_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (THERMAL, SO3):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        width = self.width
        for name in ("start", "end"):
            a = np.array(getattr(self, name), dtype=np.float64).reshape(-1, width)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        h = np.array(self.h, dtype=np.float64).reshape(-1)
        ids = np.array(self.traj_ids).reshape(-1)
        if not (len(h) == len(ids) == len(self.start) == len(self.end)):
            raise ArityMismatch("start, end, h and traj_ids must have the same length")
        h.setflags(write=False)
        ids.setflags(write=False)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "traj_ids", ids)

    @property
    def width(self) -> int:
        return self.n_q + self.n_T if self.kind == SO3 else 2 * self.n_q + self.n_T

    def __len__(self) -> int:
        return len(self.h)

    def split(self, rows: np.ndarray):
        """Split rows into ``(q, v, T)`` (thermal) or ``(Omega, T)`` (so3)."""
        n = self.n_q
        if self.kind == SO3:
            return rows[:, :n], rows[:, n:]
        return rows[:, :n], rows[:, n:2 * n], rows[:, 2 * n:]

    def state(self, row):
        if self.kind == SO3:
            return ReducedObservable(row[:3], row[3])
        n = self.n_q
        return ObservableState(row[:n], row[n:2 * n], row[2 * n:])

    @property
    def pairs(self) -> list:
        return list(self.iter_pairs())

    def iter_pairs(self) -> Iterator[tuple]:
        for a, b, h in zip(self.start, self.end, self.h):
            yield self.state(a), self.state(b), float(h)

    @classmethod
    def from_pairs(cls, pairs, traj_ids=None, meta=None) -> "TrajectoryDataset":
        pairs = list(pairs)
        first = pairs[0][0]
        if isinstance(first, ReducedObservable):
            kind, n_q, n_T = SO3, 3, 1
        else:
            kind, n_q, n_T = THERMAL, first.q.size, first.T.size
        start = np.array([a.as_array() for a, _, _ in pairs])
        end = np.array([b.as_array() for _, b, _ in pairs])
        h = np.array([hh for _, _, hh in pairs])
        ids = np.zeros(len(pairs), dtype=int) if traj_ids is None else traj_ids
        return cls(kind, n_q, n_T, start, end, h, ids, dict(meta or {}))

    def subset(self, rows) -> "TrajectoryDataset":
        rows = np.asarray(rows)
        return TrajectoryDataset(self.kind, self.n_q, self.n_T, self.start[rows], self.end[rows],
                                 self.h[rows], self.traj_ids[rows], dict(self.meta))

    # ---- CSV / JSON --------------------------------------------------

    def column_names(self) -> list[str]:
        if self.kind == SO3:
            names = lambda tag: [f"Omega{tag}_{i + 1}" for i in range(3)] + [f"T{tag}_1"]
        else:
            def names(tag):
                return ([f"q{tag}_{i + 1}" for i in range(self.n_q)]
                        + [f"v{tag}_{i + 1}" for i in range(self.n_q)]
                        + [f"T{tag}_{i + 1}" for i in range(self.n_T)])
        return ["traj_id", "h"] + names("0") + names("f")

    def to_csv(self, path) -> Path:
        """Write ``path`` (CSV, one row per pair) and ``path`` with ``.meta.json`` suffix."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.column_names())
            for tid, h, a, b in zip(self.traj_ids, self.h, self.start, self.end):
                w.writerow([str(tid), repr(float(h))] + [repr(float(x)) for x in a] + [repr(float(x)) for x in b])
        meta = dict(self.meta, kind=self.kind, n_q=self.n_q, n_T=self.n_T, n_pairs=len(self))
        meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_csv(cls, path) -> "TrajectoryDataset":
        path = Path(path)
        mp = meta_path(path)
        meta = json.loads(mp.read_text()) if mp.exists() else {}
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        kind = meta.get("kind") or (SO3 if any(c.startswith("Omega") for c in header) else THERMAL)
        if kind == SO3:
            n_q, n_T = 3, 1
        else:
            n_q = meta.get("n_q") or sum(c.startswith("q0_") for c in header)
            n_T = meta.get("n_T") or sum(c.startswith("T0_") for c in header)
        width = n_q + n_T if kind == SO3 else 2 * n_q + n_T
        ids = np.array([int(r[0]) for r in body], dtype=int)
        values = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64).reshape(-1, 1 + 2 * width)
        for key in ("kind", "n_q", "n_T", "n_pairs"):
            meta.pop(key, None)
        return cls(kind, n_q, n_T, values[:, 1:1 + width], values[:, 1 + width:], values[:, 0], ids, meta)


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def validate_dataset(d: TrajectoryDataset) -> list[str]:
    """Return one message per violated dataset invariant (empty when valid)."""
    problems = []
    if d.kind == SO3:
        temp = slice(3, 4)
    else:
        temp = slice(2 * d.n_q, 2 * d.n_q + d.n_T)
    for k in range(len(d)):
        if not (d.h[k] > 0):
            problems.append(f"pair {k}: step h must be positive (got {d.h[k]})")
        if not (np.all(np.isfinite(d.start[k])) and np.all(np.isfinite(d.end[k]))):
            problems.append(f"pair {k}: non-finite entries")
        if np.any(d.start[k, temp] <= 0) or np.any(d.end[k, temp] <= 0):
            problems.append(f"pair {k}: temperatures must be positive")
    for k in range(1, len(d)):
        if d.traj_ids[k] == d.traj_ids[k - 1] and not np.array_equal(d.end[k - 1], d.start[k]):
            problems.append(f"pair {k}: trajectory {d.traj_ids[k]} does not chain (end of pair {k - 1} != start)")
    return problems
