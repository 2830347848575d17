import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from thermovi.autodiff import (
    DiffScalarField,
    as_tensor,
    central_difference,
    grad_input,
    grad_input_t,
    grad_params,
    tree_sum,
    value_and_grad,
)
from thermovi.errors import ArityMismatch, UnsupportedPrimitive
from thermovi.nets import MlpArchitecture, init_params, mlp_apply

linear = DiffScalarField(lambda w, x: x @ w, 3, "linear")
half_square = DiffScalarField(lambda w, x: 0.5 * (x * x).sum(-1), 2, "half_square")


def mlp_field(arch):
    return DiffScalarField(lambda w, x: mlp_apply(arch, w, x)[:, 0], arch.input_dim, "mlp")


def test_linear_gradient():
    a = np.array([1.0, -2.0, 0.5])
    assert np.array_equal(grad_input(linear, a, [3.0, 1.0, 9.0]), a)


def test_quadratic_gradient():
    assert np.array_equal(grad_input(half_square, [], [3.0, 4.0]), [3.0, 4.0])


def test_arity_is_checked():
    with pytest.raises(ArityMismatch):
        grad_input(half_square, [], [1.0, 2.0, 3.0])
    with pytest.raises(ArityMismatch):
        linear([1, 2, 3], [1.0])


def test_mlp_gradient_matches_finite_differences():
    arch = MlpArchitecture(4, (8, 8, 8), 1)
    f = mlp_field(arch)
    rng = np.random.default_rng(0)
    for _ in range(10):
        w = init_params(arch, rng)
        x = rng.normal(size=4)
        g = grad_input(f, w, x)
        fd = central_difference(lambda z: f(w, z), x, 1e-5)
        assert np.abs(g - fd).max() / np.abs(g).max() < 1e-6


def test_grad_params_of_squared_input_gradient():
    # loss = |grad_x (w . x)|^2 = |w|^2
    x = as_tensor([[0.3, -1.0, 2.0]])
    w = np.array([0.5, -1.5, 2.0])
    g = grad_params(lambda p: (grad_input_t(linear, p, x) ** 2).sum(), w)
    assert np.allclose(g, 2 * w, rtol=0, atol=1e-15)


def test_symmetric_minimum_has_zero_gradient():
    g = grad_params(lambda p: ((p - 1.0) ** 2).sum() + ((p + 1.0) ** 2).sum(), np.zeros(5))
    assert np.abs(g).max() < 1e-12


def test_parameter_independent_loss_has_zero_gradient():
    g = grad_params(lambda p: torch.ones((), dtype=torch.float64) * 3.0, np.ones(4))
    assert np.array_equal(g, np.zeros(4))


def test_unsupported_primitive_is_rejected():
    with pytest.raises(UnsupportedPrimitive):
        grad_params(lambda p: torch.abs(p).sum(), np.ones(3))
    with pytest.raises(UnsupportedPrimitive):
        grad_params(lambda p: torch.special.erf(p).sum(), np.ones(3))


def test_double_differentiation_against_finite_differences():
    arch = MlpArchitecture(2, (3,), 1)
    f = mlp_field(arch)
    w = init_params(arch, 3)
    x = as_tensor(np.random.default_rng(3).normal(size=(6, 2)))

    def loss(p):
        return (grad_input_t(f, p, x) ** 2).sum()

    g = grad_params(loss, w)
    fd = central_difference(lambda p: float(loss(as_tensor(p)).detach()), w, 1e-6)
    assert np.abs(g - fd).max() / np.abs(g).max() < 1e-7


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_gradient_is_linear(alpha, beta, seed):
    arch = MlpArchitecture(3, (5,), 1)
    rng = np.random.default_rng(seed)
    w1, w2 = init_params(arch, rng), init_params(arch, rng)
    x = rng.normal(size=3)
    both = DiffScalarField(lambda w, z: alpha * mlp_apply(arch, w[:w1.size], z)[:, 0]
                           + beta * mlp_apply(arch, w[w1.size:], z)[:, 0], 3)
    f = mlp_field(arch)
    lhs = grad_input(both, np.concatenate([w1, w2]), x)
    rhs = alpha * grad_input(f, w1, x) + beta * grad_input(f, w2, x)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-14)


def test_value_and_grad():
    v, g = value_and_grad(lambda p: (p * p).sum(), np.array([1.0, 2.0]))
    assert v == 5.0 and np.array_equal(g, [2.0, 4.0])


@pytest.mark.parametrize("n", [1, 2, 5, 8, 13])
def test_tree_sum(n):
    x = torch.arange(1, n + 1, dtype=torch.float64)
    assert float(tree_sum(x)) == n * (n + 1) / 2


def test_tree_sum_is_order_fixed():
    x = as_tensor(np.random.default_rng(0).normal(size=1001) * 1e8)
    assert float(tree_sum(x)) == float(tree_sum(x.clone()))
