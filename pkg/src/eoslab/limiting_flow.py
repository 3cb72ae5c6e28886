"""Sharpness-reducing flows on the zero-loss manifold and their comparison with discrete runs.

Each flow step moves along the tangential part of ``grad lambda1`` (or of
``grad log lambda1``) and then falls back to the manifold with a fixed number
of small GD steps. ``coefficient`` multiplies the tangential gradient: with
``0.25`` (log flow) or ``0.125`` (plain flow) the flow time equals
``steps * eta^2`` of the discrete run; with ``1.0`` the flow time equals
``steps * eta^2 * c_time`` with ``c_time = 1/4`` or ``1/8``.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .errors import EigengapWarning, ProjectionError, ValidationError
from .manifold import estimate_phi, normal_projection
from .spectral import dense_spectral_info, grad_top_eigenvalue, top_eigenpairs

LOG_FLOW = "log_flow"
PLAIN_FLOW = "plain_flow"
DEFAULT_COEFFICIENT = {LOG_FLOW: 0.25, PLAIN_FLOW: 0.125}


@dataclass
class ProjectionConfig:
    method: str = "auto"            # auto | hessian_eigvecs | per_example_span
    eta_proj: float = 1e-2
    t_proj: int = 1000
    tol_manifold: float = 1e-8
    k: int = 2
    rank: Optional[int] = None
    rcond: float = 1e-10
    spectral_tol: float = 1e-10
    dense_max_dim: int = 8          # eigensolve densely up to this D, power iteration above

    def method_for(self, model):
        if self.method == "auto":
            return "per_example_span" if model.has_per_example else "hessian_eigvecs"
        return self.method


@dataclass
class FlowState:
    x: np.ndarray
    tau: float
    lambda1: float
    flow_kind: str
    residual_grad_norm: float = 0.0
    warnings: tuple = field(default_factory=tuple)
    spectral: object = field(default=None, repr=False, compare=False)  # eigenpairs at x, reused


def _flow_spectrum(model, x, proj_cfg):
    k = min(max(proj_cfg.k, 2), model.dim)
    if model.dim <= proj_cfg.dense_max_dim:
        return dense_spectral_info(model, x, k)
    return top_eigenpairs(model, x, k=k, tol=proj_cfg.spectral_tol)


def tangent_gradient(model, x, proj_cfg, info=None):
    """``(lambda1, notes, P_perp grad lambda1)`` at a point on the manifold.

    ``info`` may carry eigenpairs already computed at ``x``.
    """
    if info is None:
        info = _flow_spectrum(model, x, proj_cfg)
    notes = ()
    if info.eigengap < 10 * proj_cfg.spectral_tol:
        notes = ("eigengap_degenerate",)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EigengapWarning)
        grad_lam = grad_top_eigenvalue(model, x, info.v1, info.eigengap, proj_cfg.spectral_tol)
    proj = normal_projection(model, x, proj_cfg.method_for(model), spectral=info,
                             rank=proj_cfg.rank, rcond=proj_cfg.rcond)
    return info.lambda1, notes, proj.tangent(grad_lam)


def reproject(model, y, proj_cfg):
    """Plain GD at ``eta_proj`` for up to ``t_proj`` steps, stopping once ``||grad L|| <= tol_manifold``."""
    g = model.gradient(y)
    gn = float(np.linalg.norm(g))
    for _ in range(proj_cfg.t_proj):
        if gn <= proj_cfg.tol_manifold:
            break
        y = y - proj_cfg.eta_proj * g
        g = model.gradient(y)
        gn = float(np.linalg.norm(g))
    if not gn <= proj_cfg.tol_manifold:
        raise ProjectionError(f"re-projection residual {gn:.3e} above {proj_cfg.tol_manifold:.1e}", gn)
    return y, gn


def flow_step(model, state, eta_flow, proj_cfg, coefficient=None):
    """One explicit step of the limiting flow followed by re-projection."""
    if state.flow_kind not in DEFAULT_COEFFICIENT:
        raise ValidationError(f"unknown flow kind {state.flow_kind!r}")
    coef = DEFAULT_COEFFICIENT[state.flow_kind] if coefficient is None else coefficient
    lam1, notes, tangent = tangent_gradient(model, state.x, proj_cfg, state.spectral)
    if state.flow_kind == LOG_FLOW:
        tangent = tangent / lam1
    y = state.x - eta_flow * coef * tangent
    y, gn = reproject(model, y, proj_cfg)
    info = _flow_spectrum(model, y, proj_cfg)
    return FlowState(y, state.tau + eta_flow, info.lambda1, state.flow_kind, gn, state.warnings + notes,
                     info)


def integrate_flow(model, x0, tau_end, flow_kind=LOG_FLOW, eta_flow=1e-3, proj_cfg=None,
                   coefficient=None, project_start=True, record_every=1):
    """Euler-in-time integration of the limiting flow from ``Phi(x0)`` up to ``tau_end``.

    Stops early (with an ``eigengap_degenerate`` note on the last state) when
    the top eigenvalue stops being simple.
    """
    proj_cfg = proj_cfg or ProjectionConfig()
    x = model.check_point(x0)
    if project_start:
        phi = estimate_phi(model, x, tol_phi=min(proj_cfg.tol_manifold, 1e-10), k=2)
        x = phi.phi
    info = _flow_spectrum(model, x, proj_cfg)
    state = FlowState(x.copy(), 0.0, info.lambda1, flow_kind, float(np.linalg.norm(model.gradient(x))),
                      spectral=info)
    trace = [state]
    n_steps = int(math.ceil(tau_end / eta_flow - 1e-9)) if tau_end > 0 else 0
    for i in range(1, n_steps + 1):
        state = flow_step(model, state, eta_flow, proj_cfg, coefficient)
        state.tau = i * eta_flow
        if i % record_every == 0 or i == n_steps or state.warnings:
            trace.append(state)
        if "eigengap_degenerate" in state.warnings:
            break
    return trace


@dataclass
class TimeScaling:
    """Map between discrete steps and flow time: ``tau = step * eta^2 * c_time``."""

    c_time: float
    flow_coefficient: float
    label: str


NGD_LOG_SCALING = TimeScaling(0.25, 1.0, "tau = t*eta^2/4; flow uses grad log lambda1 with coefficient 1")
SQRT_PLAIN_SCALING = TimeScaling(0.125, 1.0, "tau = t*eta^2/8; flow uses grad lambda1 with coefficient 1")


@dataclass
class ComparisonReport:
    taus: np.ndarray
    steps: np.ndarray
    distances: np.ndarray
    relative: np.ndarray
    valid: np.ndarray
    convention: str
    c_time: float
    eta: float
    phi_points: list = field(default_factory=list)

    @property
    def max_distance(self):
        d = self.distances[self.valid]
        return float(np.max(d)) if d.size else math.nan


def _flow_at(flow_trace, tau):
    """Flow point at ``tau``: a callable reference is evaluated, a trace is interpolated linearly."""
    if callable(flow_trace):
        return np.asarray(flow_trace(tau), dtype=float)
    taus = np.array([s.tau for s in flow_trace])
    i = int(np.searchsorted(taus, tau))
    if i <= 0:
        return flow_trace[0].x
    if i >= len(taus):
        return flow_trace[-1].x
    w = (tau - taus[i - 1]) / (taus[i] - taus[i - 1])
    return (1.0 - w) * flow_trace[i - 1].x + w * flow_trace[i].x


def compare_trajectories(flow_trace, gd_trace, model, scaling, eta, taus=None, phi_kwargs=None):
    """Distance between ``Phi(x_t)`` of a discrete run and the flow point at ``tau = t eta^2 c_time``.

    ``flow_trace`` is a list of ``FlowState`` or a callable ``tau -> point``
    (e.g. a closed-form solution). ``taus`` defaults to the flow trace's
    recorded times. For each ``tau`` the
    discrete step is ``floor(tau / (eta^2 c_time))``; samples whose step lies
    beyond the trace, or whose ``Phi`` estimate fails, are marked invalid.
    """
    phi_kwargs = phi_kwargs or {}
    if taus is None:
        if callable(flow_trace):
            raise ValidationError("taus are required with a callable reference")
        taus = [s.tau for s in flow_trace]
    by_step = {rec.step: rec for rec in gd_trace if not rec.event or rec.event == "undefined_update"}
    c = scaling.c_time if isinstance(scaling, TimeScaling) else float(scaling)
    label = scaling.label if isinstance(scaling, TimeScaling) else f"tau = t*eta^2*{c}"
    steps, dists, rels, valid, phis = [], [], [], [], []
    for tau in taus:
        t = int(math.floor(tau / (eta * eta * c) + 1e-9))
        steps.append(t)
        rec = by_step.get(t)
        X = _flow_at(flow_trace, tau)
        if rec is None or not np.all(np.isfinite(rec.x)):
            dists.append(math.nan)
            rels.append(math.nan)
            valid.append(False)
            phis.append(None)
            continue
        try:
            phi = estimate_phi(model, rec.x, **phi_kwargs)
        except (FloatingPointError, ValidationError):
            phi = None
        if phi is None or not phi.converged:
            dists.append(math.nan)
            rels.append(math.nan)
            valid.append(False)
            phis.append(None)
            continue
        d = float(np.linalg.norm(phi.phi - X))
        dists.append(d)
        rels.append(d / max(float(np.linalg.norm(X)), 1e-300))
        valid.append(True)
        phis.append(phi)
    return ComparisonReport(np.asarray(taus, float), np.asarray(steps), np.asarray(dists),
                            np.asarray(rels), np.asarray(valid, bool), label, c, eta, phis)


def toy_closed_form(x0, tau, flow_kind=LOG_FLOW, coefficient=None):
    """Exact flow on the manifold ``y = 0`` of ``(1 + x^2) y^2`` from ``Phi(x0)``.

    There ``lambda1 = 2 (1 + X^2)``. The log flow conserves
    ``ln X + X^2 / 2 + 2 c tau`` and the plain flow gives ``X = X0 exp(-4 c tau)``,
    where ``c`` is the flow coefficient. ``Phi(x0)`` follows from the gradient-flow
    invariant ``ln x + x^2 / 2 - y^2 / 2``. Requires ``x0[0] > 0``.
    """
    x, y = float(x0[0]), float(x0[1])
    if not x > 0:
        raise ValidationError("toy closed form needs a positive first coordinate")
    coef = DEFAULT_COEFFICIENT[flow_kind] if coefficient is None else coefficient

    def solve(level):
        return brentq(lambda u: math.log(u) + 0.5 * u * u - level, 1e-300, 1e3, xtol=1e-15, rtol=1e-15)

    X0 = solve(math.log(x) + 0.5 * x * x - 0.5 * y * y)
    if flow_kind == LOG_FLOW:
        X = solve(math.log(X0) + 0.5 * X0 * X0 - 2.0 * coef * tau)
    elif flow_kind == PLAIN_FLOW:
        X = X0 * math.exp(-4.0 * coef * tau)
    else:
        raise ValidationError(f"unknown flow kind {flow_kind!r}")
    return np.array([X, 0.0])
