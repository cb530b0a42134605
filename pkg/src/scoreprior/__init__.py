"""Score-based diffusion models as probabilistic image priors.

Exact log-densities via the probability-flow ODE, adjoint gradients,
normalizing-flow variational posteriors, diffusion baselines and a
Gaussian ground-truth oracle.
"""

import jax

# Log-densities in 64 dimensions need float64 to hit sub-nat accuracy.
jax.config.update("jax_enable_x64", True)

from scoreprior.errors import (  # noqa: E402
    ConfigError,
    DivergedError,
    DomainError,
    NoConvergenceError,
    NumericalError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergedError",
    "DomainError",
    "NoConvergenceError",
    "NumericalError",
    "ShapeError",
]
