import math

import numpy as np
import pytest

from eoslab.errors import DegenerateManifoldError, ValidationError
from eoslab.losses import quadratic_loss, toy_product_loss
from eoslab.manifold import alignment, estimate_phi, normal_projection, observables
from eoslab.spectral import top_eigenpairs

from oracles import toy_phi


def test_phi_quadratic_is_origin():
    res = estimate_phi(quadratic_loss([1.0, 0.4]), [1.5, -2.0])
    assert res.converged
    assert np.linalg.norm(res.phi) <= 1e-9


def test_phi_toy_conserved_quantity():
    res = estimate_phi(toy_product_loss(), [1.0, 0.5])
    assert res.converged
    assert res.phi[0] == pytest.approx(0.93754, abs=1e-5)
    np.testing.assert_allclose(res.phi, toy_phi([1.0, 0.5]), atol=1e-8)


@pytest.mark.parametrize("p", [[0.4, 0.7], [1.7, -0.2], [0.9, 1.1]])
def test_phi_toy_random_points(p):
    # RK4 at step 0.1/lambda1 leaves a discretization error well below O(eta^2) scales
    res = estimate_phi(toy_product_loss(), p)
    np.testing.assert_allclose(res.phi, toy_phi(p), atol=1e-6)


def test_phi_on_manifold_is_fixed():
    res = estimate_phi(toy_product_loss(), [2.0, 0.0])
    np.testing.assert_array_equal(res.phi, [2.0, 0.0])
    assert res.flow_time_used == 0.0


def test_phi_idempotent():
    t = toy_product_loss()
    first = estimate_phi(t, [1.2, 0.4])
    second = estimate_phi(t, first.phi)
    tol_phi = 1e-10 * (1 + first.spectral.lambda1)
    assert np.linalg.norm(second.phi - first.phi) <= 10 * tol_phi


def test_phi_nonconvergence_reported():
    res = estimate_phi(toy_product_loss(), [1.0, 0.5], max_flow_time=0.01)
    assert not res.converged
    assert res.flow_time_used >= 0.01 - 1e-12


def test_phi_gradient_direction_is_null():
    # Phi(x + d g/|g|) - Phi(x) = O(d^2): errors shrink at least 0.3x per halving
    t = toy_product_loss()
    x = np.array([1.0, 0.3])
    g = t.gradient(x)
    g /= np.linalg.norm(g)
    base = toy_phi(x)
    errs = [np.linalg.norm(toy_phi(x + d * g) - base) for d in (1e-2, 5e-3)]
    assert errs[1] / errs[0] <= 0.3
    est = [np.linalg.norm(estimate_phi(t, x + d * g).phi - estimate_phi(t, x).phi)
           for d in (1e-2, 5e-3)]
    assert est[1] / est[0] <= 0.3


def test_projector_properties():
    t = toy_product_loss()
    p = np.array([1.0, 0.0])
    rng = np.random.default_rng(0)
    for method in ("hessian_eigvecs", "per_example_span"):
        P = normal_projection(t, p, method)
        np.testing.assert_allclose(P.normal([0.0, 3.0]), [0.0, 3.0], atol=1e-12)
        for _ in range(5):
            v = rng.normal(size=2)
            assert np.linalg.norm(P.normal(P.normal(v)) - P.normal(v)) <= 1e-10
            assert np.linalg.norm(P.normal(v) + P.tangent(v) - v) <= 1e-12
        M = P.matrix()
        np.testing.assert_allclose(M, M.T, atol=1e-15)


@pytest.mark.parametrize("x", [0.3, 1.0, 2.5])
def test_projection_methods_agree_on_toy(x):
    t = toy_product_loss()
    a = normal_projection(t, [x, 0.0], "hessian_eigvecs").matrix()
    b = normal_projection(t, [x, 0.0], "per_example_span").matrix()
    assert np.max(np.abs(a - b)) <= 1e-6


def test_point_manifold_projector():
    q = quadratic_loss([1.0, 0.4])
    P = normal_projection(q, [0.0, 0.0], spectral=top_eigenpairs(q, [0.0, 0.0], k=2))
    np.testing.assert_allclose(P.matrix(), np.eye(2), atol=1e-10)
    np.testing.assert_allclose(P.tangent_matrix(), np.zeros((2, 2)), atol=1e-10)


def test_projection_errors():
    q = quadratic_loss([1.0, 0.4])
    with pytest.raises(ValidationError):
        normal_projection(q, [0.0, 0.0], "per_example_span")
    with pytest.raises(ValidationError):
        normal_projection(q, [0.0, 0.0], "nope")


def _phi_origin(model):
    return estimate_phi(model, np.zeros(model.dim), k=model.dim)


def test_observables_example():
    q = quadratic_loss([1.0, 0.4])
    obs = observables(q, [0.05, 0.02], 0.1, _phi_origin(q))
    # eigenvectors come from power iteration at tol 1e-10
    assert obs.R[0] == pytest.approx(math.hypot(0.05, 0.008) - 0.1, abs=1e-9)
    assert obs.R[0] == pytest.approx(-0.0493640, abs=1e-7)
    assert obs.R[1] == pytest.approx(-0.032, abs=1e-9)
    assert obs.Rbar[1] == pytest.approx(math.sqrt(0.4 * 0.02 ** 2) - 0.1 * math.sqrt(0.5) * 0.4,
                                        abs=1e-9)
    assert obs.theta == pytest.approx(math.atan(0.008 / 0.05), abs=1e-8)


def test_observables_on_manifold():
    q = quadratic_loss([1.0, 0.4])
    phi = _phi_origin(q)
    obs = observables(q, [0.0, 0.0], 0.1, phi, lambda1_at_x=1.0)
    np.testing.assert_allclose(obs.R, [-0.1, -0.04], atol=1e-12)
    assert obs.G == 0.0
    assert obs.theta == math.pi / 2


def test_observables_aligned_displacement():
    q = quadratic_loss([1.0, 0.4])
    obs = observables(q, [1e-3, 0.0], 0.1, _phi_origin(q))
    assert obs.theta <= 1e-8
    assert obs.alignment == pytest.approx(1.0, abs=1e-8)


def test_observables_sqrt_kind():
    q = quadratic_loss([1.0, 0.4])
    obs = observables(q, [0.05, 0.02], 0.1, _phi_origin(q), kind="sqrt")
    assert obs.tilde_norm == pytest.approx(math.hypot(math.sqrt(2) * 0.05, math.sqrt(0.8) * 0.02))


def test_observables_degenerate_rank():
    t = toy_product_loss()
    phi = estimate_phi(t, [1.0, 0.2])
    with pytest.raises(DegenerateManifoldError):
        observables(t, [1.0, 0.2], 0.1, phi, rank=0)


def test_alignment_rayleigh_quotient():
    t = toy_product_loss()
    p = np.array([0.7, 0.4])
    g, H = t.gradient(p), t.hessian(p)
    ref = g @ H @ g / (np.linalg.eigvalsh(H)[-1] * (g @ g))
    assert alignment(t, p) == pytest.approx(ref, rel=1e-9)
    assert math.isnan(alignment(t, [1.0, 0.0]))
