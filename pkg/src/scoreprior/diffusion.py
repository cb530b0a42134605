"""Variance-exploding SDE and its probability-flow vector field.

The forward process is ``dx = g(t) dw`` with a geometric noise scale
``sigma(t) = sigma_min * (sigma_max / sigma_min) ** t`` on ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from scoreprior.errors import DomainError, NumericalError

_T_SLACK = 1e-12


@dataclass(frozen=True)
class DiffusionSpec:
    """Noise schedule of a VE SDE.

    Attributes:
        sigma_min: noise scale at t=0.
        sigma_max: noise scale at t=T; the terminal density is
            N(0, sigma_max^2 I).
        t_horizon: end time T (always 1.0).
        t_eps: lower integration limit used in place of t=0.
    """

    sigma_min: float = 0.01
    sigma_max: float = 10.0
    t_horizon: float = 1.0
    t_eps: float = 1e-3

    def __post_init__(self):
        if not (self.sigma_min > 0 and self.sigma_max > 0):
            raise DomainError("noise scales must be positive")
        if not self.sigma_min < self.sigma_max:
            raise DomainError(
                f"sigma_min={self.sigma_min} must be below sigma_max={self.sigma_max}"
            )
        if self.t_horizon != 1.0:
            raise DomainError("t_horizon is fixed to 1.0")
        if not 0 < self.t_eps < self.t_horizon:
            raise DomainError(f"t_eps={self.t_eps} must lie in (0, T)")

    @property
    def log_ratio(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)


def default_sigma_max(data) -> float:
    """Largest pairwise Euclidean distance in ``data``, rounded up.

    Quadratic in the number of rows; subsample large datasets first.
    """
    data = np.asarray(data, dtype=np.float64)
    sq = np.sum(data**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * data @ data.T
    return float(math.ceil(math.sqrt(max(float(d2.max()), 0.0))))


def _check_time(spec: DiffusionSpec, t):
    if isinstance(t, jax.core.Tracer):
        return
    arr = np.asarray(t)
    if arr.size and (
        np.any(arr < -_T_SLACK) or np.any(arr > spec.t_horizon + _T_SLACK)
    ):
        raise DomainError(f"t={t} outside [0, {spec.t_horizon}]")


def sigma(spec: DiffusionSpec, t):
    """Noise scale sigma(t) of the geometric schedule."""
    _check_time(spec, t)
    return spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t


def diffusion_coeff(spec: DiffusionSpec, t):
    """g(t) = sigma(t) * sqrt(2 ln(sigma_max / sigma_min))."""
    return sigma(spec, t) * math.sqrt(2.0 * spec.log_ratio)


def drift_diffusion(spec: DiffusionSpec, x, t):
    """Return ``(f(x, t), g(t))``; the VE drift is identically zero."""
    return jnp.zeros_like(x), diffusion_coeff(spec, t)


def marginal_var(spec: DiffusionSpec, t):
    """Variance added by the forward process between 0 and t."""
    return sigma(spec, t) ** 2 - spec.sigma_min**2


def perturbation_kernel(spec: DiffusionSpec, x0, t):
    """Mean and per-coordinate variance of p(x_t | x_0)."""
    return x0, marginal_var(spec, t)


@jax.tree_util.register_pytree_node_class
class PfField:
    """Probability-flow ODE vector field ``f - g^2 s / 2`` for a score."""

    def __init__(self, spec: DiffusionSpec, score):
        self.spec = spec
        self.score = score

    def tree_flatten(self):
        return (self.score,), self.spec

    @classmethod
    def tree_unflatten(cls, spec, children):
        return cls(spec, children[0])

    @property
    def dim(self) -> int:
        return self.score.dim

    def __call__(self, x, t):
        # Unchecked; used inside compiled solvers.
        g = diffusion_coeff(self.spec, t)
        return -0.5 * g**2 * self.score(x, t)


def pf_vector_field(field: PfField, x, t):
    """Evaluate the probability-flow drift at a single point, with checks."""
    _check_time(field.spec, t)
    if not isinstance(t, jax.core.Tracer) and t < field.spec.t_eps - _T_SLACK:
        raise DomainError(f"t={t} below t_eps={field.spec.t_eps}")
    s = field.score(x, t)
    if not isinstance(s, jax.core.Tracer) and not bool(jnp.all(jnp.isfinite(s))):
        raise NumericalError(f"non-finite score at t={t}, x={np.asarray(x)}")
    f, g = drift_diffusion(field.spec, x, t)
    return f - 0.5 * g**2 * s
