"""Matrix-free Hessian eigen-analysis via power iteration with deflation."""

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceWarning, EigengapWarning

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 10_000
DEFAULT_RANK_THRESHOLD = 1e-3


@dataclass
class SpectralInfo:
    values: np.ndarray          # (k,) descending
    vectors: np.ndarray         # (k, D), unit rows
    rank_estimate: int
    converged: bool = True
    residuals: np.ndarray = None
    flags: list = field(default_factory=list)

    @property
    def k(self):
        return len(self.values)

    @property
    def lambda1(self):
        return float(self.values[0])

    @property
    def v1(self):
        return self.vectors[0]

    @property
    def eigengap(self):
        if len(self.values) < 2:
            return float("inf")
        return float(self.values[0] - self.values[1])

    @property
    def pairs(self):
        return list(zip(self.values.tolist(), self.vectors))


def fix_sign(v, eps=1e-12):
    """First coordinate with magnitude above ``eps`` is made positive."""
    idx = np.flatnonzero(np.abs(v) > eps)
    if idx.size and v[idx[0]] < 0:
        return -v
    return v


def _norm(v):
    n = math.sqrt(float(v @ v))
    return n if math.isfinite(n) else float(np.linalg.norm(v))


def _orthogonalize(v, basis):
    for _ in range(2):
        for b in basis:
            v = v - (b @ v) * b
    return v


def _power_iterate(op, dim, basis, tol, max_iters, rng):
    """Dominant (largest |lambda|) eigenpair of ``op`` restricted to the complement of ``basis``.

    Returns ``(lambda, v, residual, converged, scale)`` where ``scale`` is the
    last ``||op(v)||``. When the dominant eigenvalues come as a ``+a, -a``
    pair (or any negative eigenvalue competing for dominance) either the
    residual flips direction every iteration (lopsided start) or the Rayleigh
    quotient stays well below ``||op(v)||`` (balanced start); both are
    reported early as not converged so that the caller can shift.
    """
    def start():
        v = _orthogonalize(rng.normal(size=dim), basis)
        return v / _norm(v)

    v = start()
    lam_prev = None
    restarted = False
    residual = np.inf
    nw = 0.0
    lam = 0.0
    r_prev = None
    flips = 0
    for it in range(max_iters):
        w = _orthogonalize(op(v), basis)
        nw = _norm(w)
        if not math.isfinite(nw):
            return math.nan, v, math.inf, False, math.nan
        lam = float(v @ w)
        r = w - lam * v
        residual = _norm(r)
        scale = 1.0 + abs(lam)
        if lam_prev is not None and abs(lam - lam_prev) <= tol * scale and residual <= 10 * tol * scale:
            return lam, v, residual, True, nw
        if nw <= 1e-300:
            # operator vanishes on the complement
            return 0.0, v, 0.0, True, 0.0
        if r_prev is not None and r @ r_prev < -0.5 * residual * _norm(r_prev):
            flips += 1
        else:
            flips = 0
        mixed = it >= 20 and abs(lam) < 0.9 * nw and residual > 1e-3 * nw
        if flips >= 5 or mixed:
            return lam, v, residual, False, nw
        r_prev = r
        lam_prev = lam
        v = w / nw
        if not restarted and it == max_iters // 2:
            v = start()
            lam_prev = None
            restarted = True
    return lam, v, residual, False, nw


def top_eigenpairs(model, x, k=1, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS, seed=0,
                   rank_threshold=DEFAULT_RANK_THRESHOLD, hvp=None):
    """Top-``k`` eigenpairs of the Hessian at ``x`` from Hessian-vector products.

    Each stage runs power iteration on the Hessian deflated by the previously
    found pairs (``H - sum lambda_i v_i v_i^T``), restricted to their orthogonal
    complement. If the dominant eigenvalue of a stage is negative (or the
    stage fails to converge, e.g. on a ``+a, -a`` pair), the stage is re-run
    on the shifted operator ``H + sigma I`` with ``sigma`` the magnitude
    estimate, so that the largest algebraic eigenvalue is returned.
    """
    x = model.check_point(x)
    dim = model.dim
    if not 1 <= k <= dim:
        raise ValueError(f"k must be in [1, {dim}], got {k}")
    if hvp is None:
        def hvp(v):
            return model._hvp(x, v)
    rng = np.random.default_rng(seed)

    values, vectors, residuals = [], [], []
    flags = []
    all_converged = True
    for _ in range(k):
        def deflated(v, vals=tuple(values), vecs=tuple(vectors)):
            w = hvp(v)
            for lam_i, v_i in zip(vals, vecs):
                w = w - lam_i * (v_i @ v) * v_i
            return w

        lam, v, res, ok, nw = _power_iterate(deflated, dim, vectors, tol, max_iters, rng)
        if math.isfinite(lam) and (lam < 0 or not ok):
            shift = max(abs(lam), nw)
            _, v_s, _, ok, _ = _power_iterate(lambda u: deflated(u) + shift * u, dim, vectors,
                                              tol, max_iters, rng)
            v = v_s
            w = deflated(v)
            lam = float(v @ w)
            res = _norm(_orthogonalize(w, vectors) - lam * v)
        v = fix_sign(v / _norm(v))
        values.append(lam)
        vectors.append(v)
        residuals.append(res)
        all_converged &= ok

    order = np.argsort(values, kind="stable")[::-1]
    values = np.array(values)[order]
    vectors = np.array(vectors)[order]
    residuals = np.array(residuals)[order]
    if not all_converged:
        flags.append("not_converged")
        warnings.warn(f"power iteration did not converge; residuals {residuals}", ConvergenceWarning,
                      stacklevel=2)
    if values[0] <= tol:
        flags.append("zero_hessian")
    info = SpectralInfo(values, vectors, 0, all_converged, residuals, flags)
    info.rank_estimate = estimate_rank(info, rank_threshold)
    return info


def estimate_rank(info, threshold_ratio=DEFAULT_RANK_THRESHOLD):
    """Number of eigenvalues at least ``threshold_ratio * lambda1``; 0 flags a degenerate Hessian."""
    lam1 = float(info.values[0])
    if lam1 <= 0:
        log.warning("estimate_rank: non-positive top eigenvalue, manifold is degenerate")
        return 0
    m = int(np.sum(info.values >= threshold_ratio * lam1))
    return m


def dense_eigenpairs(model, x, k=None):
    """Dense fallback (``D <= 50``) used as an independent check in tests."""
    if model.dim > 50:
        raise ValueError("dense fallback limited to D <= 50")
    vals, vecs = np.linalg.eigh(model.hessian(x))
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    k = model.dim if k is None else k
    return vals[:k], np.array([fix_sign(vecs[:, i]) for i in range(k)])


def dense_spectral_info(model, x, k=1, rank_threshold=DEFAULT_RANK_THRESHOLD):
    """``SpectralInfo`` from a dense symmetric eigensolve, for small ``D`` where it beats power iteration."""
    vals, vecs = dense_eigenpairs(model, x, k)
    info = SpectralInfo(vals.copy(), vecs, 0, True, np.zeros(len(vals)), [])
    if vals[0] <= DEFAULT_TOL:
        info.flags.append("zero_hessian")
    info.rank_estimate = estimate_rank(info, rank_threshold)
    return info


def grad_top_eigenvalue(model, x, v1, eigengap=None, tol=DEFAULT_TOL, eps=None):
    """Gradient of the top Hessian eigenvalue, ``nabla^3 L(x)[v1, v1, .]``.

    Uses the model's analytic third-order oracle when it has one; otherwise
    central differences of ``g(y) = v1 . hvp(y, v1)`` along each coordinate
    with ``v1`` frozen, step ``eps = 1e-4 (1 + ||x||)``.
    """
    x = model.check_point(x)
    v1 = np.asarray(v1, dtype=float)
    if eigengap is not None and eigengap < 10 * tol:
        warnings.warn(f"eigengap {eigengap:.3e} below 10*tol; gradient of lambda1 is unreliable",
                      EigengapWarning, stacklevel=2)
    exact = model.third_directional(x, v1)
    if exact is not None:
        return np.asarray(exact, dtype=float)
    if eps is None:
        eps = 1e-4 * (1.0 + np.linalg.norm(x))
    out = np.empty(model.dim)
    for j in range(model.dim):
        xp, xm = x.copy(), x.copy()
        xp[j] += eps
        xm[j] -= eps
        out[j] = (v1 @ model.hvp(xp, v1) - v1 @ model.hvp(xm, v1)) / (xp[j] - xm[j])
    return out
