"""Exception and warning types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class UndefinedUpdate(ArithmeticError):
    """The update rule is undefined at this point (zero gradient or zero loss)."""


class DegenerateManifoldError(ValueError):
    """The estimated rank of the Hessian at the manifold point is zero."""


class ProjectionError(RuntimeError):
    """Re-projection onto the manifold did not reach the requested tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConfigError(ValueError):
    """Malformed experiment configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EigengapWarning(UserWarning):
    """Top eigenvalue is (numerically) degenerate; derived quantities are unreliable."""


class ConvergenceWarning(UserWarning):
    """An iterative routine stopped before reaching its tolerance."""
