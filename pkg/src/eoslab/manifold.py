"""Gradient-flow limit map and manifold-relative observables.

``estimate_phi`` integrates gradient flow to (numerical) convergence;
``normal_projection`` builds the projector onto the normal space of the
zero-loss manifold at a point on it; ``observables`` computes the
Hessian-weighted displacement quantities used to track the dynamics.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateManifoldError, ValidationError
from .spectral import DEFAULT_RANK_THRESHOLD, estimate_rank, top_eigenpairs

THETA_FLOOR = 1e-300


@dataclass
class PhiResult:
    phi: np.ndarray
    residual_grad_norm: float
    flow_time_used: float
    spectral: object
    converged: bool = True
    n_steps: int = 0

    @property
    def rank(self):
        return self.spectral.rank_estimate if self.spectral is not None else 0


def _rk4(model, x, h):
    k1 = model.gradient(x)
    k2 = model.gradient(x - 0.5 * h * k1)
    k3 = model.gradient(x - 0.5 * h * k2)
    k4 = model.gradient(x - h * k3)
    return x - (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def estimate_phi(model, x, tol_phi=None, max_flow_time=1e4, k=2, step_factor=0.1,
                 max_step_factor=None, max_steps=2_000_000, rank_threshold=DEFAULT_RANK_THRESHOLD,
                 spectral_tol=1e-10, lambda1=None):
    """Limit of gradient flow started at ``x``.

    Classical RK4 with initial step ``step_factor / lambda1(x)``; a step that
    increases the loss is rejected and the step halved. After an accepted
    step the step may grow by 10% up to ``max_step_factor / lambda1``
    (defaults to the initial step, i.e. no growth). Stops once
    ``||grad L|| <= tol_phi`` (default ``1e-10 (1 + lambda1)``) or when the
    flow time exceeds ``max_flow_time``; in the latter case the best point is
    returned with ``converged=False``. Raises ``FloatingPointError`` if the
    loss becomes non-finite.
    """
    x = model.check_point(x).copy()
    if lambda1 is None:
        lambda1 = top_eigenpairs(model, x, k=1, tol=1e-8).lambda1
    lam = max(abs(lambda1), 1e-12)
    if tol_phi is None:
        tol_phi = 1e-10 * (1.0 + lam)
    h = step_factor / lam
    h_max = (max_step_factor if max_step_factor is not None else step_factor) / lam
    h_min = 1e-14 * h

    loss = model.value(x)
    gnorm = float(np.linalg.norm(model.gradient(x)))
    t = 0.0
    steps = 0
    converged = gnorm <= tol_phi
    while not converged and t < max_flow_time and steps < max_steps:
        x_new = _rk4(model, x, h)
        new_loss = model.value(x_new) if np.all(np.isfinite(x_new)) else math.inf
        if not math.isfinite(new_loss):
            if h <= h_min:
                raise FloatingPointError("estimate_phi: gradient flow diverged")
            h *= 0.5
            continue
        if new_loss > loss:
            if h <= h_min:
                break
            h *= 0.5
            continue
        x, loss = x_new, new_loss
        t += h
        steps += 1
        gnorm = float(np.linalg.norm(model.gradient(x)))
        converged = gnorm <= tol_phi
        h = min(1.1 * h, h_max)

    spectral = top_eigenpairs(model, x, k=min(k, model.dim), tol=spectral_tol,
                              rank_threshold=rank_threshold)
    return PhiResult(x, gnorm, t, spectral, converged, steps)


@dataclass
class Projector:
    """Orthogonal projector ``P = Q Q^T`` onto a normal space; ``tangent`` applies ``I - P``."""

    basis: np.ndarray  # (D, r), orthonormal columns

    @property
    def rank(self):
        return self.basis.shape[1]

    def normal(self, v):
        return self.basis @ (self.basis.T @ v)

    def tangent(self, v):
        return v - self.normal(v)

    def matrix(self):
        return self.basis @ self.basis.T

    def tangent_matrix(self):
        return np.eye(self.basis.shape[0]) - self.matrix()


def normal_projection(model, p, method="hessian_eigvecs", spectral=None, rank=None, k=None,
                      rcond=1e-10):
    """Projector onto the normal space of the zero-loss manifold at ``p``.

    ``hessian_eigvecs`` spans the top-``rank`` Hessian eigenvectors (rank
    estimated from ``k`` eigenpairs if not given). ``per_example_span`` spans
    the residual gradients ``grad f_i(p)``; the least-squares projection is
    computed through an SVD pseudo-inverse with relative cutoff ``rcond``.
    """
    p = model.check_point(p)
    if method == "per_example_span":
        J = model.output_jacobian(p)
        if J is None:
            raise ValidationError(f"{model.name}: no per-example decomposition available")
        U, s, Vt = np.linalg.svd(np.atleast_2d(J), full_matrices=False)
        if s.size == 0 or s[0] == 0:
            return Projector(np.zeros((model.dim, 0)))
        keep = s > rcond * s[0]
        return Projector(Vt[keep].T.copy())
    if method != "hessian_eigvecs":
        raise ValidationError(f"unknown projection method {method!r}")
    if spectral is None:
        spectral = top_eigenpairs(model, p, k=min(k or 2, model.dim))
    m = spectral.rank_estimate if rank is None else rank
    if m > spectral.k:
        raise ValidationError(f"rank {m} exceeds the {spectral.k} computed eigenpairs")
    return Projector(spectral.vectors[:m].T.copy())


@dataclass
class ManifoldObservables:
    R: np.ndarray
    Rbar: np.ndarray
    theta: float
    G: float
    alignment: float
    tilde_norm: float
    rank: int
    kind: str = "ngd"


def alignment(model, x, lambda1=None, grad=None):
    """``g^T H g / (lambda1 ||g||^2)`` at ``x``; NaN at critical points."""
    g = model.gradient(x) if grad is None else grad
    gg = float(g @ g)
    if gg <= 1e-300:
        return math.nan
    if lambda1 is None:
        lambda1 = top_eigenpairs(model, x, k=1).lambda1
    return float(g @ model.hvp(x, g)) / (lambda1 * gg)


def observables(model, x, eta, phi_result, kind="ngd", rank=None, lambda1_at_x=None):
    """Displacement observables of ``x`` relative to ``phi_result.phi``.

    ``kind='ngd'`` measures ``x~ = H(Phi)(x - Phi)``; ``kind='sqrt'`` measures
    ``x~ = sqrt(2 H(Phi))(x - Phi)``, both restricted to the top-``rank``
    eigenpairs at ``Phi``.
    """
    x = model.check_point(x)
    spec = phi_result.spectral
    m = spec.rank_estimate if rank is None else min(rank, spec.k)
    if m < 1:
        raise DegenerateManifoldError("rank of the Hessian at Phi(x) is zero")
    lam = spec.values[:m]
    V = spec.vectors[:m]
    c = V @ (x - phi_result.phi)

    tail_sq = np.cumsum(((lam * c) ** 2)[::-1])[::-1]
    R = np.sqrt(tail_sq) - lam * eta
    tail_bar = np.cumsum((np.clip(lam, 0.0, None) * c * c)[::-1])[::-1]
    Rbar = np.sqrt(tail_bar) - eta * math.sqrt(0.5) * lam

    if kind == "ngd":
        coords = lam * c
    elif kind == "sqrt":
        coords = np.sqrt(2.0 * np.clip(lam, 0.0, None)) * c
    else:
        raise ValidationError(f"unknown observable kind {kind!r}")
    G = abs(float(coords[0]))
    rest = float(np.linalg.norm(coords[1:]))
    theta = math.pi / 2 if G < THETA_FLOOR else math.atan(rest / G)

    if lambda1_at_x is None:
        lambda1_at_x = top_eigenpairs(model, x, k=1).lambda1
    align = alignment(model, x, lambda1_at_x)
    return ManifoldObservables(R, Rbar, theta, G, align, float(np.linalg.norm(coords)), m, kind)
