import warnings

import numpy as np
import pytest

from eoslab.errors import EigengapWarning
from eoslab.losses import mlp_regression_loss, quadratic_loss, synthetic_regression, toy_product_loss
from eoslab.spectral import (dense_eigenpairs, estimate_rank, grad_top_eigenvalue, top_eigenpairs)

from oracles import fd_gradient, toy_lambda1


def test_quadratic_pairs():
    info = top_eigenpairs(quadratic_loss([1.0, 0.4]), [0.3, -2.0], k=2)
    np.testing.assert_allclose(info.values, [1.0, 0.4], atol=1e-10)
    np.testing.assert_allclose(info.vectors, np.eye(2), atol=1e-8)
    assert estimate_rank(info) == 2


def test_toy_on_manifold():
    t = toy_product_loss()
    one = top_eigenpairs(t, [1.0, 0.0], k=1)
    assert one.lambda1 == pytest.approx(4.0, abs=1e-9)
    np.testing.assert_allclose(one.v1, [0.0, 1.0], atol=1e-8)
    two = top_eigenpairs(t, [1.0, 0.0], k=2)
    assert abs(two.values[1]) <= 1e-9
    assert estimate_rank(two) == 1


def test_rayleigh_residual_at_convergence():
    data = synthetic_regression(10, 2, 1, seed=3)
    model = mlp_regression_loss([2, 5, 1], "tanh", data)
    x = model.init_params(seed=3)
    tol = 1e-10
    info = top_eigenpairs(model, x, k=3, tol=tol)
    assert info.converged
    lam1 = info.lambda1
    r = model.hvp(x, info.v1) - lam1 * info.v1
    assert np.linalg.norm(r) <= 10 * tol * (1 + lam1)
    dense, _ = dense_eigenpairs(model, x, k=3)
    np.testing.assert_allclose(info.values, dense, atol=1e-7 * (1 + lam1))


def test_indefinite_hessian_gives_largest_algebraic():
    # toy Hessian at (0, 0.5): diag(0.5, 2); at (1, 0.1) it has a small negative eigenvalue
    t = toy_product_loss()
    for p in ([0.0, 0.5], [1.0, 0.1], [2.0, 1.5]):
        info = top_eigenpairs(t, p, k=2)
        ref = np.sort(np.linalg.eigvalsh(t.hessian(p)))[::-1]
        np.testing.assert_allclose(info.values, ref, atol=1e-8)


def test_zero_hessian_is_degenerate():
    t = toy_product_loss()
    info = top_eigenpairs(t, [0.0, 0.0], k=1, hvp=lambda v: np.zeros(2))
    assert "zero_hessian" in info.flags
    assert estimate_rank(info) == 0


def test_sign_convention_deterministic():
    t = toy_product_loss()
    a = top_eigenpairs(t, [0.4, 0.9], k=2, seed=0)
    b = top_eigenpairs(t, [0.4, 0.9], k=2, seed=7)
    np.testing.assert_allclose(a.vectors, b.vectors, atol=1e-8)
    for v in a.vectors:
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        assert v[nz[0]] > 0


def test_k_out_of_range():
    with pytest.raises(ValueError):
        top_eigenpairs(toy_product_loss(), [1.0, 0.0], k=3)


@pytest.mark.parametrize("x, expected", [(1.0, [4.0, 0.0]), (2.0, [8.0, 0.0])])
def test_grad_top_eigenvalue_examples(x, expected):
    t = toy_product_loss()
    info = top_eigenpairs(t, [x, 0.0], k=2)
    np.testing.assert_allclose(grad_top_eigenvalue(t, [x, 0.0], info.v1), expected, atol=1e-8)


def test_grad_top_eigenvalue_quadratic_is_zero():
    q = quadratic_loss([2.0, 1.0, 0.5])
    info = top_eigenpairs(q, [1.0, 1.0, 1.0])
    assert np.all(grad_top_eigenvalue(q, [1.0, 1.0, 1.0], info.v1) == 0)


def test_grad_top_eigenvalue_off_manifold_matches_differences():
    t = toy_product_loss()
    p = np.array([0.8, 0.3])
    info = top_eigenpairs(t, p, k=2)
    assert info.eigengap >= 0.1 * info.lambda1
    fd = fd_gradient(toy_lambda1, p, h=1e-6)
    np.testing.assert_allclose(grad_top_eigenvalue(t, p, info.v1), fd, rtol=1e-3)


def test_grad_top_eigenvalue_differencing_path():
    # an MLP has no analytic third-order oracle, so HVP differences are used
    data = synthetic_regression(8, 2, 1, seed=1)
    model = mlp_regression_loss([2, 3, 1], "tanh", data)
    x = model.init_params(seed=5)
    info = top_eigenpairs(model, x, k=2)
    assert info.eigengap >= 0.1 * info.lambda1
    g = grad_top_eigenvalue(model, x, info.v1, info.eigengap)
    fd = fd_gradient(lambda p: float(np.linalg.eigvalsh(model.hessian(p))[-1]), x, h=1e-5)
    assert np.linalg.norm(g - fd) <= 1e-3 * np.linalg.norm(fd)


def test_small_eigengap_warns():
    t = toy_product_loss()
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        grad_top_eigenvalue(t, [1.0, 0.0], [0.0, 1.0], eigengap=1e-12)
    assert any(issubclass(x.category, EigengapWarning) for x in w)
