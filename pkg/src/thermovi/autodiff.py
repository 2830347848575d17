"""Exact first and second order differentiation on top of torch autograd.

Two capabilities are needed by the rest of the package:

* input gradients of scalar fields (``dG/dq``, ``dG/dv``, ``dG/dT``) that end
  up inside integrator residuals, and
* parameter gradients of losses built from those input gradients, which
  means differentiating through a gradient (``create_graph=True``).

Everything runs in float64. Evaluation of user rules happens under
:class:`primitive_guard`, which rejects any torch operation outside
:data:`PRIMITIVES` with :class:`UnsupportedPrimitive`. Adding an operation to
the set requires that torch provides its double-backward rule and that a
finite-difference test covers it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch.overrides import TorchFunctionMode

from .errors import ArityMismatch, UnsupportedPrimitive

DTYPE = torch.float64

# Differentiable math. Each entry has a closed-form derivative that is itself
# built from entries of this set, so second derivatives stay inside it.
MATH_PRIMITIVES = frozenset({
    "add", "__add__", "__radd__", "__iadd__",
    "sub", "__sub__", "__rsub__", "rsub",
    "mul", "__mul__", "__rmul__",
    "div", "__truediv__", "__rtruediv__",
    "neg", "__neg__", "__pos__",
    "pow", "__pow__", "__rpow__", "square",
    "matmul", "__matmul__", "__rmatmul__", "mm", "bmm", "einsum",
    "sum", "sigmoid", "tanh", "exp", "log", "sqrt", "sin", "cos",
    "where",
})

# Shape plumbing, constructors and metadata. No numerical content.
STRUCTURAL = frozenset({
    "__getitem__", "__setitem__", "__get__", "__len__", "__iter__", "__format__",
    "__lt__", "__le__", "__gt__", "__ge__", "__eq__", "__ne__", "__bool__",
    "__float__", "__index__", "__array__", "__hash__",
    "lt", "le", "gt", "ge", "eq", "ne", "any", "all", "isfinite",
    "reshape", "view", "flatten", "unsqueeze", "squeeze", "expand", "expand_as",
    "transpose", "permute", "contiguous", "clone", "detach", "t", "mT",
    "stack", "cat", "split", "unbind", "narrow", "select", "diag_embed",
    "diagonal", "broadcast_to",
    "zeros", "ones", "eye", "tensor", "as_tensor", "zeros_like", "ones_like",
    "full", "full_like", "arange", "empty",
    "to", "double", "numpy", "item", "tolist", "cpu",
    "size", "dim", "numel", "type", "requires_grad_", "backward", "grad",
    "new_zeros", "new_ones", "new_tensor",
})

PRIMITIVES = MATH_PRIMITIVES | STRUCTURAL


class primitive_guard(TorchFunctionMode):
    """Raise :class:`UnsupportedPrimitive` for torch calls outside the closed set."""

    def __torch_function__(self, func, types, args=(), kwargs=None):
        name = getattr(func, "__name__", repr(func))
        if name not in PRIMITIVES:
            raise UnsupportedPrimitive(f"torch operation {name!r} is outside the supported primitive set")
        return func(*args, **(kwargs or {}))


def as_tensor(x, requires_grad=False) -> torch.Tensor:
    t = torch.as_tensor(np.array(x, dtype=np.float64), dtype=DTYPE)
    if requires_grad:
        t = t.clone().requires_grad_(True)
    return t


def input_gradients(value: torch.Tensor, inputs: Sequence[torch.Tensor], create_graph: bool = True):
    """Gradients of a batch of independent scalars with respect to batched inputs.

    ``value`` has shape ``(N,)`` where row ``k`` depends only on row ``k`` of
    each input, so the gradient of ``value.sum()`` is the row-wise gradient.
    Inputs that do not influence ``value`` get zero gradients.
    """
    grads = torch.autograd.grad(value.sum(), list(inputs), create_graph=create_graph, allow_unused=True)
    return tuple(torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs))


@dataclass(frozen=True)
class DiffScalarField:
    """Scalar field ``rule(params, x) -> (N,)`` over batched inputs ``x`` of shape ``(N, arity)``."""

    rule: Callable[[torch.Tensor, torch.Tensor], torch.Tensor]
    arity: int
    name: str = "field"

    def evaluate_t(self, params: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.arity:
            raise ArityMismatch(f"{self.name} expects {self.arity} inputs, got {x.shape[-1]}")
        with primitive_guard():
            return self.rule(params, x)

    def __call__(self, params, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xt = as_tensor(np.atleast_2d(x))
        out = self.evaluate_t(as_tensor(params), xt).detach().numpy()
        return float(out[0]) if single else out


def grad_input_t(f: DiffScalarField, params: torch.Tensor, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Differentiable ``grad_x f`` for use inside losses (batched, shape ``(N, arity)``)."""
    if x.shape[-1] != f.arity:
        raise ArityMismatch(f"{f.name} expects {f.arity} inputs, got {x.shape[-1]}")
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    y = f.evaluate_t(params, x)
    (g,) = input_gradients(y, [x], create_graph=create_graph)
    return g


def grad_input(f: DiffScalarField, params, x) -> np.ndarray:
    """Exact gradient of ``f(params, .)`` at ``x`` (a vector, or a batch of rows)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != f.arity:
        raise ArityMismatch(f"{f.name} expects {f.arity} inputs, got {x.shape[-1]}")
    single = x.ndim == 1
    xt = as_tensor(np.atleast_2d(x), requires_grad=True)
    g = grad_input_t(f, as_tensor(params), xt, create_graph=False).detach().numpy()
    return g[0] if single else g


def grad_params(loss: Callable[[torch.Tensor], torch.Tensor], params) -> np.ndarray:
    """Exact ``d loss / d params``.

    ``loss`` receives the parameters as a float64 tensor and may contain
    :func:`grad_input_t` nodes; those are differentiated a second time.
    """
    p = as_tensor(params, requires_grad=True)
    with primitive_guard():
        value = loss(p)
    return _param_grad(value, p)


def value_and_grad(loss: Callable[[torch.Tensor], torch.Tensor], params) -> tuple[float, np.ndarray]:
    p = as_tensor(params, requires_grad=True)
    with primitive_guard():
        value = loss(p)
    return float(value.detach()), _param_grad(value, p)


def _param_grad(value: torch.Tensor, p: torch.Tensor) -> np.ndarray:
    if not value.requires_grad:
        return np.zeros(p.shape)
    (g,) = torch.autograd.grad(value, [p], allow_unused=True)
    return np.zeros(p.shape) if g is None else g.detach().numpy().copy()


def central_difference(fun: Callable[[np.ndarray], float], x, step: float = 1e-6, indices=None) -> np.ndarray:
    """Central finite-difference gradient; the independent check for the exact paths."""
    x = np.asarray(x, dtype=np.float64)
    idx = list(range(x.size)) if indices is None else list(indices)
    out = np.zeros(len(idx))
    for k, i in enumerate(idx):
        e = np.zeros_like(x)
        e.flat[i] = step
        out[k] = (fun(x + e) - fun(x - e)) / (2 * step)
    return out


def tree_sum(x: torch.Tensor) -> torch.Tensor:
    """Pairwise sum over the leading axis in a fixed order.

    The reduction order does not depend on the number of torch threads, so
    serial and threaded runs agree bitwise.
    """
    while x.shape[0] > 1:
        n = x.shape[0]
        if n % 2:
            x = torch.cat([x, torch.zeros_like(x[:1])])
            n += 1
        x = x[: n // 2] + x[n // 2:]
    return x[0] if x.shape[0] else torch.zeros((), dtype=x.dtype)
