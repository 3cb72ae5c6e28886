"""Stableness along the gradient segment and the two-step edge-of-stability identities."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .losses import LOSS_FLOOR, LossModel
from .optimizers import GRAD_FLOOR, NORMALIZED_GD, SQRT_LOSS_GD
from .spectral import top_eigenpairs

STABLENESS_CAP = 1e6
STABLE_THRESHOLD = 2.0
ZERO_SET_RATIO = 1e-16   # L below this fraction of L(x) on the segment counts as meeting L = 0


@dataclass
class StablenessResult:
    value: float
    lower_bound: float
    grid_points: int
    argmax_s: float
    converged: bool = True
    diverged: bool = False

    @property
    def stable(self):
        return bool(self.value <= STABLE_THRESHOLD)


def stableness(model, x, eta_eff, grid_n=16, tol=1e-10):
    """``eta_eff * max_s lambda1(H(x - s grad L(x)))`` over ``grid_n + 1`` equispaced ``s`` in ``[0, eta_eff]``.

    The segment follows the raw (unnormalized) gradient. ``lower_bound`` is
    ``eta_eff * lambda1(H(x))``.
    """
    x = model.check_point(x)
    if not eta_eff >= 0:
        raise ValueError("eta_eff must be non-negative")
    g = model.gradient(x)
    if float(np.linalg.norm(g)) <= GRAD_FLOOR:
        raise ValueError("stableness: gradient vanishes at x")
    s_grid = np.linspace(0.0, eta_eff, grid_n + 1)
    lams = []
    ok = True
    for s in s_grid:
        info = top_eigenpairs(model, x - s * g, k=1, tol=tol)
        ok &= info.converged
        lams.append(info.lambda1)
    lams = np.array(lams)
    i = int(np.argmax(lams))
    return StablenessResult(float(eta_eff * lams[i]), float(eta_eff * lams[0]), grid_n + 1,
                            float(s_grid[i]), bool(ok))


class SqrtLoss(LossModel):
    """``sqrt(L)`` of a wrapped model, with Hessian ``(2 L H - g g^T) / (4 L^{3/2})``."""

    def __init__(self, base):
        self.base = base
        self.dim = base.dim
        self.name = f"sqrt({base.name})"

    # points are validated by the public entry points, so the base is called directly

    def _value(self, x):
        return math.sqrt(max(self.base._value(x), 0.0))

    def _gradient(self, x):
        val = self.base._value(x)
        if val <= LOSS_FLOOR:
            return np.full(self.dim, math.nan)
        return self.base._gradient(x) / (2.0 * math.sqrt(val))

    def _hvp(self, x, v):
        val = self.base._value(x)
        if val <= LOSS_FLOOR:
            return np.full(self.dim, math.nan)
        g = self.base._gradient(x)
        return (2.0 * val * self.base._hvp(x, v) - g * (g @ v)) / (4.0 * val ** 1.5)


def sqrt_stableness(model, x, eta, grid_n=16, cap=STABLENESS_CAP, tol=1e-10):
    """Stableness of ``sqrt(L)`` at ``(x, eta)`` along ``-grad sqrt(L)``.

    Besides the grid, the point of smallest ``L`` on the segment is located
    by bounded scalar minimization; the Hessian of ``sqrt(L)`` is unbounded
    near zeros of ``L``, so a segment that (numerically) meets the zero set,
    or any value above ``cap``, is reported as ``diverged`` with value capped.
    """
    x = model.check_point(x)
    sq = SqrtLoss(model)
    d = sq.gradient(x)
    if not np.all(np.isfinite(d)):
        return StablenessResult(cap, math.nan, 0, 0.0, True, True)
    s_grid = list(np.linspace(0.0, eta, grid_n + 1))
    res = minimize_scalar(lambda s: model.value(x - s * d), bounds=(0.0, eta), method="bounded",
                          options={"xatol": 1e-14 * max(eta, 1e-300)})
    s_grid.append(float(res.x))
    l0 = model.value(x)
    lb = float(eta * top_eigenpairs(sq, x, k=1, tol=tol).lambda1)
    for s in s_grid:
        if model.value(x - s * d) <= max(LOSS_FLOOR, ZERO_SET_RATIO * l0):
            return StablenessResult(cap, lb, len(s_grid), float(s), True, True)
    best, best_s = lb / eta, 0.0
    for s in s_grid[1:]:
        lam = top_eigenpairs(sq, x - s * d, k=1, tol=tol).lambda1
        if lam > best:
            best, best_s = lam, float(s)
    value = float(eta * best)
    diverged = not math.isfinite(value) or value >= cap
    return StablenessResult(min(value, cap), lb, len(s_grid), best_s, True, diverged)


@dataclass
class TwoStepRecord:
    step: int
    inv_stableness_sum: float
    sqrt_loss_sum: float
    lambda1: float
    predicted_sqrt_sum: float
    ratio: float                 # sqrt_loss_sum / predicted_sqrt_sum
    inv_stableness_deviation: float
    sqrt_stableness_diverged: bool = False


def eos_two_step_report(model, trace, eta, kind=NORMALIZED_GD, grid_n=16, tol=1e-10,
                        with_stableness=True):
    """Per consecutive-pair two-step identities over ``trace``.

    For Normalized GD the stableness uses ``eta_t = eta / ||grad L(x_t)||``
    and the predicted two-step sum of ``sqrt(L)`` is ``eta sqrt(lambda1 / 2)``.
    For GD on ``sqrt(L)`` the prediction is ``eta lambda1`` and the stableness
    of ``sqrt(L)`` itself is evaluated (divergence flagged, not reported).
    """
    out = []
    cache = {}

    def point_stats(rec):
        if rec.step in cache:
            return cache[rec.step]
        lam = top_eigenpairs(model, rec.x, k=1, tol=tol).lambda1
        inv_s = math.nan
        diverged = False
        if with_stableness:
            if kind == NORMALIZED_GD:
                s = stableness(model, rec.x, eta / rec.grad_norm, grid_n, tol)
                inv_s = 1.0 / s.value
            elif kind == SQRT_LOSS_GD:
                s = sqrt_stableness(model, rec.x, eta, grid_n, tol=tol)
                inv_s = 1.0 / s.value
                diverged = s.diverged
        cache[rec.step] = (lam, inv_s, diverged)
        return cache[rec.step]

    for a, b in zip(trace[:-1], trace[1:]):
        if a.event or b.event or b.step != a.step + 1:
            continue
        if not (a.grad_norm > GRAD_FLOOR and b.grad_norm > GRAD_FLOOR):
            continue
        lam_a, inv_a, div_a = point_stats(a)
        _, inv_b, _ = point_stats(b)
        sq_sum = a.sqrt_loss + b.sqrt_loss
        if kind == SQRT_LOSS_GD:
            predicted = eta * lam_a
        else:
            predicted = eta * math.sqrt(lam_a / 2.0)
        inv_sum = inv_a + inv_b
        out.append(TwoStepRecord(a.step, inv_sum, sq_sum, lam_a, predicted, sq_sum / predicted,
                                 inv_sum - 1.0, div_a))
    return out
