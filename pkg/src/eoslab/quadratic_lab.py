"""Exact Normalized-GD dynamics on quadratics and checkers for their invariant sets and alignment.

Everything runs in the eigenbasis of ``A``: with ``x~ = A x / eta`` the
Normalized GD update becomes ``x~_i <- x~_i (1 - lambda_i / ||x~||)``.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import UndefinedUpdate, ValidationError
from .losses import QuadraticLoss
from .optimizers import sqrt_loss_gd_step

TOL = 1e-12
HYPOTHESIS_FLOOR = 1e-14


def _check_lambdas(lam):
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1 or lam.size == 0:
        raise ValidationError("eigenvalues must be a non-empty vector")
    if np.any(lam <= 0) or not np.all(np.isfinite(lam)):
        raise ValidationError("eigenvalues must be positive and finite")
    if np.any(np.diff(lam) > 0):
        raise ValidationError("eigenvalues must be sorted in decreasing order")
    if lam.size > 1 and not lam[0] > lam[1]:
        raise ValidationError("top eigenvalue must be simple")
    return lam


@dataclass(frozen=True)
class TildeState:
    x: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lam", _check_lambdas(self.lam))
        x = np.asarray(self.x, dtype=float)
        if x.shape != self.lam.shape or not np.all(np.isfinite(x)):
            raise ValidationError("tilde state must be finite and match the eigenvalue count")
        object.__setattr__(self, "x", x)


def tilde_map(lam, x):
    norm = float(np.linalg.norm(x))
    if norm <= 1e-300:
        raise UndefinedUpdate("tilde update undefined at the origin")
    return x * (1.0 - lam / norm)


def quadratic_tilde_step(state):
    return TildeState(tilde_map(state.lam, state.x), state.lam)


def tilde_trajectory(lam, x0, steps):
    """Rows ``x~(0) .. x~(steps)``; truncated at an undefined update."""
    lam = _check_lambdas(lam)
    out = np.empty((steps + 1, lam.size))
    out[0] = x0
    for t in range(steps):
        try:
            out[t + 1] = tilde_map(lam, out[t])
        except UndefinedUpdate:
            return out[:t + 1]
    return out


@dataclass
class LimitCycleReport:
    C: float
    s: int
    residual_even: float
    residual_odd: float
    converged: bool
    steps: int = 0
    angle: float = math.nan
    two_step_sum_error: float = math.nan
    precondition_ok: bool = True
    message: str = ""


def detect_limit_cycle(lam, x0, max_steps=10_000, tol=1e-12):
    """Run the tilde map until both parity subsequences settle; extract ``C`` and ``s``.

    Convergence means ``||x~(t+2) - x~(t)|| < tol`` for two consecutive ``t``.
    ``C = ||x~(2t)|| / lambda1`` and ``s = sign <v1, x~(2t)>`` at the last even
    step. Residuals measure the distance to ``C s lambda1 v1`` (even) and
    ``(C - 1) s lambda1 v1`` (odd).
    """
    lam = _check_lambdas(lam)
    x = np.asarray(x0, dtype=float)
    if abs(x[0]) < HYPOTHESIS_FLOOR:
        return LimitCycleReport(math.nan, 0, math.nan, math.nan, False, 0, precondition_ok=False,
                                message="initial point has no component along v1")
    hist = [x]
    converged = False
    t = 0
    while t < max_steps:
        try:
            hist.append(tilde_map(lam, hist[-1]))
        except UndefinedUpdate as exc:
            return LimitCycleReport(math.nan, 0, math.nan, math.nan, False, t, message=str(exc))
        t += 1
        if abs(hist[-1][0]) < HYPOTHESIS_FLOOR:
            return LimitCycleReport(math.nan, 0, math.nan, math.nan, False, t, precondition_ok=False,
                                    message="v1 component vanished")
        if t >= 3 and (np.linalg.norm(hist[-1] - hist[-3]) < tol
                       and np.linalg.norm(hist[-2] - hist[-4]) < tol):
            converged = True
            break
        if len(hist) > 4:
            hist.pop(0)
    last = len(hist) - 1
    even_idx = last if t % 2 == 0 else last - 1
    even, odd = hist[even_idx], hist[even_idx + 1] if even_idx + 1 <= last else tilde_map(lam, hist[even_idx])
    lam1 = lam[0]
    C = float(np.linalg.norm(even) / lam1)
    s = 1 if even[0] > 0 else -1
    e1 = np.zeros_like(even)
    e1[0] = 1.0
    res_even = float(np.linalg.norm(even - C * s * lam1 * e1))
    res_odd = float(np.linalg.norm(odd - (C - 1.0) * s * lam1 * e1))
    angle = math.atan2(float(np.linalg.norm(even[1:])), abs(float(even[0])))
    sum_err = abs(float(np.linalg.norm(even) + np.linalg.norm(odd)) - lam1)
    return LimitCycleReport(C, s, res_even, res_odd, converged and 0 < C < 1, t, angle, sum_err)


def limiting_losses(C, lam1, eta):
    """Limits of ``L(x(2t))`` and ``L(x(2t+1))``: ``C^2 lambda1 eta^2 / 2`` and ``(C-1)^2 lambda1 eta^2 / 2``."""
    return 0.5 * C * C * lam1 * eta * eta, 0.5 * (C - 1.0) ** 2 * lam1 * eta * eta


def tilde_to_loss(lam, x_tilde, eta):
    """``L(x)`` for ``x = eta A^{-1} x~`` in the eigenbasis."""
    return 0.5 * eta * eta * float(np.sum(x_tilde * x_tilde / lam))


# --------------------------------------------------------------------------
# invariant sets and alignment properties


@dataclass
class ViolationReport:
    violations: int = 0
    checked: int = 0
    first: dict = None
    skipped: bool = False
    details: list = field(default_factory=list)

    @property
    def ok(self):
        return self.violations == 0

    def add(self, **info):
        self.violations += 1
        if self.first is None:
            self.first = info
        if len(self.details) < 20:
            self.details.append(info)


def tail_norms(trace):
    """``||Pi_j x~(t)||`` for every ``t`` and ``j`` (tail sums of squared coordinates)."""
    sq = trace * trace
    return np.sqrt(np.cumsum(sq[:, ::-1], axis=1)[:, ::-1])


def entry_bound(lam, x0_norm, j, bound="tight"):
    """Step after which ``x~(t)`` is guaranteed to lie in the ``j``-th invariant set.

    ``bound='tight'`` uses ``(lambda1/lambda_j) ln(lambda1/lambda_j)`` for the
    second phase, ``bound='conservative'`` the larger ``(lambda1/lambda_D) ln(lambda1/lambda_j)``.
    """
    lam1, lam_j, lam_d = lam[0], lam[j], lam[-1]
    first = max((x0_norm - lam1) / lam_d, 0.0)
    ratio = lam1 / lam_j
    if bound not in ("tight", "conservative"):
        raise ValidationError(f"unknown entry bound {bound!r}")
    second = (ratio if bound == "tight" else lam1 / lam_d) * math.log(ratio)
    return first + second


def check_invariant_sets(lam, trace, bound="tight", tol=TOL):
    """Every ``j`` and every ``t`` past the entry bound must satisfy ``||Pi_j x~(t)|| <= lambda_j + tol``."""
    lam = _check_lambdas(lam)
    trace = np.asarray(trace, dtype=float)
    norms = tail_norms(trace)
    x0_norm = float(np.linalg.norm(trace[0]))
    rep = ViolationReport()
    for j in range(lam.size):
        start = math.ceil(entry_bound(lam, x0_norm, j, bound) - 1e-12)
        for t in range(max(start, 0), trace.shape[0]):
            rep.checked += 1
            excess = norms[t, j] - lam[j]
            if excess > tol:
                rep.add(t=t, j=j + 1, excess=float(excess))
    return rep


def first_inside(lam, trace, tol=TOL):
    """First step from which ``x~`` stays inside every invariant set; ``None`` if never."""
    norms = tail_norms(np.asarray(trace, dtype=float))
    inside = np.all(norms <= lam + tol, axis=1)
    outside = np.flatnonzero(~inside)
    if outside.size == 0:
        return 0
    t = int(outside[-1]) + 1
    return t if t < len(trace) else None


def check_alignment_properties(lam, trace, tol=TOL, start=None):
    """Norm-drop bound, one/two-step growth of ``|<v1, x~>|``, and its monotonicity on low-norm steps.

    Returns a dict of ``ViolationReport`` keyed ``norm_drop``, ``one_two_step``
    and ``monotone``. Checks start at ``start`` (default: first step from
    which the trace stays inside all invariant sets). Steps with
    ``|<v1, x~>| < 1e-14`` mark the hypothesis as failed and are skipped.
    """
    lam = _check_lambdas(lam)
    trace = np.asarray(trace, dtype=float)
    if start is None:
        start = first_inside(lam, trace, tol)
    reports = {"norm_drop": ViolationReport(), "one_two_step": ViolationReport(),
               "monotone": ViolationReport()}
    if start is None:
        for r in reports.values():
            r.skipped = True
        return reports
    lam1, lam_d = lam[0], lam[-1]
    norms = np.linalg.norm(trace, axis=1)
    first = np.abs(trace[:, 0])
    if np.any(first[start:] < HYPOTHESIS_FLOOR):
        for r in reports.values():
            r.skipped = True
        return reports
    half = lam1 / 2.0
    n = trace.shape[0]
    drop_cap = half - lam_d ** 2 / (2.0 * lam1)
    prev_low = None
    for t in range(start, n):
        if norms[t] > half:
            if t + 1 < n:
                reports["norm_drop"].checked += 1
                bound = max(drop_cap, lam1 - norms[t])
                if norms[t + 1] > bound + tol:
                    reports["norm_drop"].add(t=t, norm_next=float(norms[t + 1]), bound=float(bound))
        else:
            for k in (1, 2):
                if t + k < n:
                    reports["one_two_step"].checked += 1
                    if first[t + k] < first[t] - tol:
                        reports["one_two_step"].add(t=t, k=k, drop=float(first[t] - first[t + k]))
            if prev_low is not None:
                reports["monotone"].checked += 1
                if first[t] < first[prev_low] - tol:
                    reports["monotone"].add(t=t, previous=prev_low,
                                            drop=float(first[prev_low] - first[t]))
            prev_low = t
    return reports


# --------------------------------------------------------------------------
# GD on sqrt(L) versus the tilde map


def sqrt_quadratic_equivalence(lam, x0, eta, steps):
    """Max over steps of ``||(2A)^{1/2} x(t) / eta - x~(t)||`` for GD on ``sqrt(L)``.

    ``lam`` is a list of eigenvalues (diagonal ``A``) or a symmetric matrix,
    which is eigendecomposed first. Comparison stops at the first undefined
    update in either trajectory.
    """
    arr = np.asarray(lam, dtype=float)
    model = QuadraticLoss(arr) if arr.ndim == 2 else QuadraticLoss.from_eigenvalues(arr)
    vals, vecs = model.eigenvalues, model.eigenvectors
    x = model.check_point(x0)
    if model.value(x) <= 0:
        raise ValidationError("sqrt equivalence needs L(x0) > 0")
    root = np.sqrt(2.0 * vals)

    def mapped(p):
        return root * (vecs.T @ p) / eta

    z = mapped(x)
    worst = 0.0
    for _ in range(steps):
        try:
            x = sqrt_loss_gd_step(model, x, eta)
            z = tilde_map(vals, z)
        except UndefinedUpdate:
            break
        worst = max(worst, float(np.linalg.norm(mapped(x) - z)))
    return worst


# --------------------------------------------------------------------------
# random instances and suite


def random_instance(seed, dim=5, low=0.2, high=1.0, gap=0.05, max_norm=3.0):
    """Distinct eigenvalues in ``[low, high]`` with top gap ``>= gap``; ``||x~0|| <= max_norm``."""
    rng = np.random.default_rng(seed)
    while True:
        lam = np.sort(rng.uniform(low, high, dim))[::-1]
        if (dim == 1 or lam[0] - lam[1] >= gap) and np.all(np.diff(lam) < 0) and lam[-1] >= 0.1:
            break
    x0 = rng.normal(size=dim)
    x0 *= rng.uniform(0.0, max_norm) / np.linalg.norm(x0)
    return lam, x0


def instance_summary(seed, steps=2000, dim=5, cycle_steps=100_000, bound="tight"):
    lam, x0 = random_instance(seed, dim)
    trace = tilde_trajectory(lam, x0, steps)
    inv = check_invariant_sets(lam, trace, bound=bound)
    ali = check_alignment_properties(lam, trace)
    cyc = detect_limit_cycle(lam, x0, max_steps=cycle_steps)
    return {
        "seed": seed,
        "eigenvalues": lam.tolist(),
        "x0_norm": float(np.linalg.norm(x0)),
        "invariant_sets": inv.ok,
        "invariant_set_violations": inv.violations,
        "monotone_alignment": ali["monotone"].ok,
        "norm_drop": ali["norm_drop"].ok,
        "one_two_step": ali["one_two_step"].ok,
        "limit_cycle": bool(cyc.converged and cyc.residual_even <= 1e-8 and cyc.residual_odd <= 1e-8),
        "C": cyc.C,
        "s": cyc.s,
        "first_violation": inv.first,
    }


def run_suite(seeds=100, steps=2000, dim=5, bound="tight"):
    """Per-instance summaries plus an overall pass/fail per property."""
    rows = [instance_summary(seed, steps, dim, bound=bound) for seed in range(seeds)]
    keys = ["invariant_sets", "monotone_alignment", "norm_drop", "one_two_step", "limit_cycle"]
    overall = {k: ("pass" if all(r[k] for r in rows) else "fail") for k in keys}
    return overall, rows
