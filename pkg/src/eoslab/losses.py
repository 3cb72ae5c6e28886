"""Differentiable loss models with analytic first- and second-order oracles.

Every model exposes ``value``, ``gradient`` and ``hvp``. Some also expose a
per-example decomposition ``L = mean_i l_i`` with ``l_i = (f_i - b_i)^2``
(``per_example_gradients`` returns the rows ``grad l_i``, ``output_jacobian``
returns the rows ``grad f_i``) and an analytic ``third_directional``.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ValidationError

LOSS_FLOOR = 1e-300


class LossModel:
    """Base class. Subclasses implement ``_value``, ``_gradient`` and ``_hvp``."""

    dim: int
    name = "loss"

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise ValidationError(
                f"{self.name}: expected a vector of dimension {self.dim}, got shape {x.shape}"
            )
        # the sum is finite for finite entries unless it overflows; check entrywise only then
        if not math.isfinite(x.sum()) and not np.all(np.isfinite(x)):
            raise ValidationError(f"{self.name}: non-finite parameter entries")
        return x

    def value(self, x):
        return float(self._value(self.check_point(x)))

    def gradient(self, x):
        return self._gradient(self.check_point(x))

    def hvp(self, x, v):
        return self._hvp(self.check_point(x), self.check_point(v))

    def hessian(self, x):
        """Dense Hessian assembled column by column from ``hvp`` (small D only)."""
        x = self.check_point(x)
        eye = np.eye(self.dim)
        H = np.column_stack([self._hvp(x, e) for e in eye])
        return 0.5 * (H + H.T)

    def sqrt_value(self, x):
        val = self.value(x)
        return 0.0 if val < LOSS_FLOOR else float(np.sqrt(val))

    # optional oracles ---------------------------------------------------
    @property
    def has_per_example(self):
        return False

    def per_example_gradients(self, x):
        return None

    def output_jacobian(self, x):
        return None

    def third_directional(self, x, v):
        return None

    def describe(self):
        return {"kind": self.name, "dim": self.dim}


class QuadraticLoss(LossModel):
    """``L(x) = 0.5 x^T A x`` for symmetric positive-definite ``A``."""

    name = "quadratic"

    def __init__(self, matrix):
        A = np.atleast_2d(np.asarray(matrix, dtype=float))
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValidationError("quadratic: matrix must be square")
        if not np.all(np.isfinite(A)):
            raise ValidationError("quadratic: non-finite matrix entries")
        scale = max(1.0, float(np.max(np.abs(A))))
        if np.max(np.abs(A - A.T)) > 1e-12 * scale:
            raise ValidationError("quadratic: matrix is not symmetric")
        A = 0.5 * (A + A.T)
        eigvals, eigvecs = np.linalg.eigh(A)
        order = np.argsort(eigvals)[::-1]
        eigvals, eigvecs = eigvals[order], eigvecs[:, order]
        if eigvals[-1] <= 0:
            raise ValidationError("quadratic: matrix is not positive definite")
        if len(eigvals) > 1 and not eigvals[0] > eigvals[1]:
            raise ValidationError("quadratic: top eigenvalue must be simple (lambda1 > lambda2)")
        self.A = A
        self.dim = A.shape[0]
        self.eigenvalues = eigvals
        self.eigenvectors = eigvecs

    @classmethod
    def from_eigenvalues(cls, eigenvalues):
        return cls(np.diag(np.asarray(eigenvalues, dtype=float)))

    def _value(self, x):
        return 0.5 * x @ self.A @ x

    def _gradient(self, x):
        return self.A @ x

    def _hvp(self, x, v):
        return self.A @ v

    def third_directional(self, x, v):
        self.check_point(x)
        return np.zeros(self.dim)

    def describe(self):
        return {"kind": self.name, "dim": self.dim, "eigenvalues": self.eigenvalues.tolist()}


class ToyProductLoss(LossModel):
    """``L(x, y) = (1 + x^2) y^2``; the zero-loss manifold is the line ``y = 0``.

    One residual: ``f(x, y) = sqrt(1 + x^2) y`` with target 0.
    """

    name = "toy"
    dim = 2

    def _value(self, p):
        x, y = p
        return (1.0 + x * x) * y * y

    def _gradient(self, p):
        x, y = p
        return np.array([2.0 * x * y * y, 2.0 * (1.0 + x * x) * y])

    def _hessian(self, p):
        x, y = p
        return np.array([[2.0 * y * y, 4.0 * x * y], [4.0 * x * y, 2.0 * (1.0 + x * x)]])

    def _hvp(self, p, v):
        return self._hessian(p) @ v

    def hessian(self, x):
        return self._hessian(self.check_point(x))

    def third_directional(self, p, v):
        x, y = self.check_point(p)
        a, b = self.check_point(v)
        # nonzero third derivatives: L_xxy = 4y, L_xyy = 4x
        return np.array([8.0 * y * a * b + 4.0 * x * b * b, 4.0 * y * a * a + 8.0 * x * a * b])

    @property
    def has_per_example(self):
        return True

    def per_example_gradients(self, x):
        return self.gradient(x)[None, :]

    def output_jacobian(self, p):
        x, y = self.check_point(p)
        r = np.sqrt(1.0 + x * x)
        return np.array([[x * y / r, r]])


# --------------------------------------------------------------------------
# MLP regression


def _tanh(z):
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def _gelu(z):
    cdf = ndtr(z)
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return z * cdf, cdf + z * pdf, pdf * (2.0 - z * z)


ACTIVATIONS = {"tanh": _tanh, "gelu": _gelu}


@dataclass(frozen=True)
class RegressionDataset:
    inputs: np.ndarray
    targets: np.ndarray
    seed: int = 0

    @property
    def n(self):
        return self.inputs.shape[0]


def synthetic_regression(n_samples, in_dim, out_dim, seed=0):
    """Seeded smooth teacher: ``y = sin(x W) c`` with Gaussian inputs."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_samples, in_dim))
    W = rng.normal(size=(in_dim, 4))
    c = rng.normal(size=(4, out_dim)) / 2.0
    Y = np.sin(X @ W) @ c
    return RegressionDataset(X, Y, seed)


class MLPRegressionLoss(LossModel):
    """Mean squared error of a fully connected network with a smooth activation.

    ``L(x) = 1/(n * out) * sum_{i,c} (f_c(x, a_i) - b_ic)^2``; the output layer
    is linear. Parameters are flattened layer by layer as ``(W_l, b_l)`` with
    ``W_l`` of shape ``(out_l, in_l)`` in row-major order.
    """

    name = "mlp"

    def __init__(self, layer_widths, activation, dataset):
        widths = [int(w) for w in layer_widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValidationError("mlp: need at least input and output widths, all positive")
        if activation not in ACTIVATIONS:
            raise ValidationError(f"mlp: unsupported activation {activation!r}")
        X = np.asarray(dataset.inputs, dtype=float)
        Y = np.asarray(dataset.targets, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if X.ndim != 2 or X.shape[1] != widths[0]:
            raise ValidationError(f"mlp: inputs must have {widths[0]} columns")
        if Y.shape != (X.shape[0], widths[-1]):
            raise ValidationError(f"mlp: targets must have shape ({X.shape[0]}, {widths[-1]})")
        if X.shape[0] * widths[-1] < 1:
            raise ValidationError("mlp: empty dataset")
        self.widths = widths
        self.activation = activation
        self._act = ACTIVATIONS[activation]
        self.X, self.Y = X, Y
        self.dataset = dataset
        self.n_residuals = Y.size
        self._shapes = []
        offset = 0
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            self._shapes.append((offset, fan_out, fan_in))
            offset += fan_out * fan_in + fan_out
        self.dim = offset

    def init_params(self, seed=0, scale=1.0):
        rng = np.random.default_rng(seed)
        parts = []
        for _, fan_out, fan_in in self._shapes:
            parts.append(rng.normal(size=fan_out * fan_in) * scale / np.sqrt(fan_in))
            parts.append(np.zeros(fan_out))
        return np.concatenate(parts)

    def _unpack(self, x):
        layers = []
        for off, fan_out, fan_in in self._shapes:
            W = x[off:off + fan_out * fan_in].reshape(fan_out, fan_in)
            b = x[off + fan_out * fan_in:off + fan_out * fan_in + fan_out]
            layers.append((W, b))
        return layers

    def _forward(self, layers):
        acts = [self.X]
        pre = []
        derivs = []
        a = self.X
        for idx, (W, b) in enumerate(layers):
            z = a @ W.T + b
            pre.append(z)
            if idx < len(layers) - 1:
                a, d1, d2 = self._act(z)
                derivs.append((d1, d2))
            else:
                a = z
            acts.append(a)
        return acts, pre, derivs

    def _backward(self, layers, acts, derivs, delta):
        grads = []
        for idx in range(len(layers) - 1, -1, -1):
            W, _ = layers[idx]
            grads.append((delta.T @ acts[idx], delta.sum(axis=0)))
            if idx > 0:
                delta = (delta @ W) * derivs[idx - 1][0]
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    def residuals(self, x):
        layers = self._unpack(self.check_point(x))
        acts, _, _ = self._forward(layers)
        return acts[-1] - self.Y

    def _value(self, x):
        r = self.residuals(x)
        return np.sum(r * r) / self.n_residuals

    def _gradient(self, x):
        layers = self._unpack(x)
        acts, _, derivs = self._forward(layers)
        delta = 2.0 * (acts[-1] - self.Y) / self.n_residuals
        return self._backward(layers, acts, derivs, delta)

    def _hvp(self, x, v):
        # Pearlmutter R-operator: forward tangent pass, then differentiated backward pass.
        layers = self._unpack(x)
        dirs = self._unpack(v)
        acts, pre, derivs = self._forward(layers)
        n_layers = len(layers)
        r_acts = [np.zeros_like(self.X)]
        r_pre = []
        for idx, ((W, _), (VW, Vb)) in enumerate(zip(layers, dirs)):
            rz = r_acts[-1] @ W.T + acts[idx] @ VW.T + Vb
            r_pre.append(rz)
            r_acts.append(derivs[idx][0] * rz if idx < n_layers - 1 else rz)

        delta = 2.0 * (acts[-1] - self.Y) / self.n_residuals
        r_delta = 2.0 * r_acts[-1] / self.n_residuals
        grads = []
        for idx in range(n_layers - 1, -1, -1):
            W, _ = layers[idx]
            VW, _ = dirs[idx]
            grads.append((r_delta.T @ acts[idx] + delta.T @ r_acts[idx], r_delta.sum(axis=0)))
            if idx > 0:
                d1, d2 = derivs[idx - 1]
                back = delta @ W
                r_delta = (r_delta @ W + delta @ VW) * d1 + back * d2 * r_pre[idx - 1]
                delta = back * d1
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])

    @property
    def has_per_example(self):
        return True

    def output_jacobian(self, x):
        """Rows ``grad f_{i,c}(x)``, ordered sample-major, shape ``(n * out, D)``."""
        layers = self._unpack(self.check_point(x))
        acts, _, derivs = self._forward(layers)
        n, n_out = self.Y.shape
        J = np.empty((n, n_out, self.dim))
        for c in range(n_out):
            delta = np.zeros((n, n_out))
            delta[:, c] = 1.0
            blocks = []
            for idx in range(len(layers) - 1, -1, -1):
                W, _ = layers[idx]
                gW = delta[:, :, None] * acts[idx][:, None, :]
                blocks.append(np.concatenate([gW.reshape(n, -1), delta], axis=1))
                if idx > 0:
                    delta = (delta @ W) * derivs[idx - 1][0]
            blocks.reverse()
            J[:, c, :] = np.concatenate(blocks, axis=1)
        return J.reshape(n * n_out, self.dim)

    def per_example_gradients(self, x):
        r = self.residuals(x).reshape(-1)
        return 2.0 * r[:, None] * self.output_jacobian(x)

    def describe(self):
        return {
            "kind": self.name,
            "dim": self.dim,
            "widths": self.widths,
            "activation": self.activation,
            "n_samples": int(self.X.shape[0]),
            "data_seed": int(self.dataset.seed),
        }


def quadratic_loss(spec):
    """Build a quadratic model from a matrix or from a list of eigenvalues."""
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 1:
        return QuadraticLoss.from_eigenvalues(arr)
    return QuadraticLoss(arr)


def toy_product_loss():
    return ToyProductLoss()


def mlp_regression_loss(layer_widths, activation_kind, dataset):
    return MLPRegressionLoss(layer_widths, activation_kind, dataset)


# --------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FiniteDiffReport:
    grad_error: float
    hvp_error: float
    ok: bool
    message: str = ""


def _rel_err(exact, approx):
    return float(np.linalg.norm(exact - approx) / (1.0 + np.linalg.norm(exact)))


def finite_diff_check(model, x, v=None, tol=1e-5, rng=None):
    """Compare ``gradient`` and ``hvp`` against central differences.

    The step is ``eps**(1/3) * max(1, |x_i|)`` per coordinate for the gradient
    and ``eps**(1/3) * max(1, max|x|)`` along the (unit) probe for the HVP.
    Errors are ``||exact - fd|| / (1 + ||exact||)``.
    """
    x = model.check_point(x)
    if v is None:
        rng = np.random.default_rng(0) if rng is None else rng
        v = rng.normal(size=model.dim)
    v = np.asarray(v, dtype=float)
    v = v / np.linalg.norm(v)
    base = np.finfo(float).eps ** (1.0 / 3.0)

    try:
        g = model.gradient(x)
        fd_g = np.empty(model.dim)
        for i in range(model.dim):
            h = base * max(1.0, abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd_g[i] = (model.value(xp) - model.value(xm)) / (xp[i] - xm[i])
        hv = model.hvp(x, v)
        h = base * max(1.0, float(np.max(np.abs(x))))
        fd_hv = (model.gradient(x + h * v) - model.gradient(x - h * v)) / (2.0 * h)
    except (FloatingPointError, ValidationError) as exc:
        return FiniteDiffReport(np.nan, np.nan, False, str(exc))

    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(hv))
            and np.all(np.isfinite(fd_g)) and np.all(np.isfinite(fd_hv))):
        return FiniteDiffReport(np.nan, np.nan, False, "non-finite model output")
    ge, he = _rel_err(g, fd_g), _rel_err(hv, fd_hv)
    return FiniteDiffReport(ge, he, ge <= tol and he <= tol)
