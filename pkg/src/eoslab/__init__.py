"""Edge-of-stability laboratory: Normalized GD and GD on sqrt(L), manifold diagnostics, limiting flows."""

from .errors import (ConfigError, ConvergenceWarning, DegenerateManifoldError, EigengapWarning,
                     ProjectionError, UndefinedUpdate, ValidationError)
from .losses import (LossModel, MLPRegressionLoss, QuadraticLoss, ToyProductLoss, finite_diff_check,
                     mlp_regression_loss, quadratic_loss, synthetic_regression, toy_product_loss)
from .manifold import estimate_phi, normal_projection, observables
from .optimizers import (NoiseSchedule, OptimizerKind, gd_step, normalized_gd_step, perturbed_wrapper,
                         run, sqrt_loss_gd_step)
from .spectral import estimate_rank, grad_top_eigenvalue, top_eigenpairs

__version__ = "0.1.0"
