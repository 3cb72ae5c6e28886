"""Discrete update rules and the trace-recording driver."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import UndefinedUpdate, ValidationError
from .losses import LOSS_FLOOR
from .manifold import estimate_phi, observables
from .spectral import top_eigenpairs

log = logging.getLogger(__name__)

GRAD_FLOOR = 1e-300

GD = "gd"
NORMALIZED_GD = "ngd"
SQRT_LOSS_GD = "sqrt"
KINDS = (GD, NORMALIZED_GD, SQRT_LOSS_GD)


def gd_step(model, x, eta):
    return x - eta * model.gradient(x)


def normalized_gd_step(model, x, eta):
    g = model.gradient(x)
    norm = float(np.linalg.norm(g))
    if norm <= GRAD_FLOOR:
        raise UndefinedUpdate("normalized GD is undefined at a critical point")
    return x - eta * (g / norm)


def sqrt_loss_gd_step(model, x, eta):
    val = model.value(x)
    if val <= LOSS_FLOOR:
        raise UndefinedUpdate("GD on sqrt(L) is undefined where L = 0")
    return x - eta * model.gradient(x) / (2.0 * math.sqrt(val))


STEPS = {GD: gd_step, NORMALIZED_GD: normalized_gd_step, SQRT_LOSS_GD: sqrt_loss_gd_step}


def effective_lr(model, x, eta, kind, grad=None, loss=None):
    if kind == GD:
        return eta
    if kind == NORMALIZED_GD:
        g = model.gradient(x) if grad is None else grad
        n = float(np.linalg.norm(g))
        return eta / n if n > GRAD_FLOOR else math.inf
    val = model.value(x) if loss is None else loss
    return eta / (2.0 * math.sqrt(val)) if val > LOSS_FLOOR else math.inf


@dataclass
class NoiseSchedule:
    """Uniform-ball perturbation of radius ``radius`` every ``t_freq`` steps."""

    enabled: bool = False
    t_freq: Optional[int] = None
    radius: Optional[float] = None
    seed: int = 0

    def resolved(self, eta):
        t_freq = self.t_freq if self.t_freq is not None else math.ceil(eta ** -0.1)
        radius = self.radius if self.radius is not None else 1e-8 * eta
        if self.enabled and t_freq < 1:
            raise ValidationError("t_freq must be >= 1")
        if radius < 0:
            raise ValidationError("noise radius must be >= 0")
        return NoiseSchedule(self.enabled, int(t_freq), float(radius), self.seed)


@dataclass
class OptimizerKind:
    kind: str
    eta: float
    noise: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown optimizer kind {self.kind!r}")
        if not self.eta > 0:
            raise ValidationError("eta must be positive")
        self.noise = self.noise.resolved(self.eta)


def sample_ball(rng, dim, radius):
    direction = rng.normal(size=dim)
    direction /= np.linalg.norm(direction)
    return direction * radius * rng.uniform() ** (1.0 / dim)


class PerturbedStep:
    """Wraps a base update; at steps ``t % t_freq == 0`` adds uniform-ball noise.

    Calling returns ``(x_next, noise_applied)``. Steps are numbered from 1.
    """

    def __init__(self, base_step, schedule):
        self.base_step = base_step
        self.schedule = schedule
        self.rng = np.random.default_rng(schedule.seed)

    def __call__(self, model, x, eta, t):
        x_next = self.base_step(model, x, eta)
        sched = self.schedule
        if sched.enabled and sched.radius > 0 and t % sched.t_freq == 0:
            return x_next + sample_ball(self.rng, x.shape[0], sched.radius), True
        return x_next, False


def perturbed_wrapper(base_step, schedule):
    return PerturbedStep(base_step, schedule)


@dataclass
class DiagConfig:
    every: int = 0              # 0 disables diagnostics
    k: int = 2
    phi_tol: Optional[float] = None
    phi_max_flow_time: float = 1e4
    phi_max_step_factor: Optional[float] = None
    rank: Optional[int] = None
    stableness: bool = False
    grid_n: int = 16
    spectral_tol: float = 1e-10


@dataclass
class Diagnostics:
    lambda1_at_x: float
    lambda1_at_phi: float
    phi: np.ndarray
    observables: object = None
    stableness: Optional[float] = None
    stableness_lb: Optional[float] = None
    phi_converged: bool = True


@dataclass
class TraceRecord:
    step: int
    loss: float
    sqrt_loss: float
    grad_norm: float
    eta_effective: float
    x: np.ndarray
    noise_applied: bool = False
    diagnostics: Optional[Diagnostics] = None
    event: str = ""


def diagnose(model, x, eta, kind, cfg, grad=None, loss=None):
    from .diagnostics import stableness as stableness_fn  # avoid import cycle

    spec_x = top_eigenpairs(model, x, k=1, tol=cfg.spectral_tol)
    phi = estimate_phi(model, x, tol_phi=cfg.phi_tol, max_flow_time=cfg.phi_max_flow_time,
                       k=min(cfg.k, model.dim), max_step_factor=cfg.phi_max_step_factor,
                       spectral_tol=cfg.spectral_tol, lambda1=spec_x.lambda1)
    obs = None
    m = phi.spectral.rank_estimate if cfg.rank is None else cfg.rank
    if m >= 1:
        obs = observables(model, x, eta, phi, kind="sqrt" if kind == SQRT_LOSS_GD else "ngd",
                          rank=m, lambda1_at_x=spec_x.lambda1)
    diag = Diagnostics(spec_x.lambda1, phi.spectral.lambda1, phi.phi, obs,
                       phi_converged=phi.converged)
    if cfg.stableness:
        eta_eff = effective_lr(model, x, eta, kind, grad, loss)
        if math.isfinite(eta_eff):
            res = stableness_fn(model, x, eta_eff, cfg.grid_n, tol=cfg.spectral_tol)
            diag.stableness, diag.stableness_lb = res.value, res.lower_bound
    return diag


def _record(model, x, t, eta, kind, noise, diag_cfg):
    loss = model.value(x)
    g = model.gradient(x)
    gn = float(np.linalg.norm(g))
    rec = TraceRecord(t, loss, math.sqrt(loss) if loss > LOSS_FLOOR else 0.0, gn,
                      effective_lr(model, x, eta, kind, g, loss), x.copy(), noise)
    if diag_cfg is not None and diag_cfg.every and t % diag_cfg.every == 0:
        rec.diagnostics = diagnose(model, x, eta, kind, diag_cfg, g, loss)
    return rec


def run(model, kind, x0, steps, diag_every=0, eta=None, noise=None, diag=None, on_record=None):
    """Iterate the chosen update ``steps`` times and return one record per iterate.

    ``kind`` is an ``OptimizerKind`` or a kind string (then ``eta`` is needed).
    Row ``t`` describes ``x_t`` (row 0 is the initial point). Full diagnostics
    are computed at every ``diag_every``-th row. An ``UndefinedUpdate`` ends
    the trace with an ``undefined_update`` event row; a non-finite iterate
    ends it with a ``nan_abort`` row. ``on_record`` is called with each
    record as it is produced (used to stream CSV rows); the terminal event is
    set on the last record in place, so streaming writers hold one row back.
    """
    if isinstance(kind, str):
        kind = OptimizerKind(kind, eta, noise or NoiseSchedule())
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    diag_cfg = diag if diag is not None else DiagConfig(every=diag_every)
    if diag is not None and diag_every:
        diag_cfg = replace(diag, every=diag_every)
    stepper = perturbed_wrapper(STEPS[kind.kind], kind.noise)
    x = model.check_point(x0).copy()
    eta = kind.eta

    def emit(rec):
        trace.append(rec)
        if on_record is not None:
            on_record(rec)

    trace = []
    emit(_record(model, x, 0, eta, kind.kind, False, diag_cfg))
    for t in range(1, steps + 1):
        try:
            x_next, noisy = stepper(model, x, eta, t)
        except UndefinedUpdate as exc:
            log.info("trace terminated at step %d: %s", t, exc)
            trace[-1].event = "undefined_update"
            break
        if not np.all(np.isfinite(x_next)):
            bad = TraceRecord(t, math.nan, math.nan, math.nan, math.nan, x_next, noisy,
                              event="nan_abort")
            emit(bad)
            break
        x = x_next
        emit(_record(model, x, t, eta, kind.kind, noisy, diag_cfg))
    return trace
