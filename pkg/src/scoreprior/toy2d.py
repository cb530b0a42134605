"""Two-dimensional test problems with brute-force ground truth.

The bimodal problem has a symmetric two-component Gaussian-mixture prior
and a single noisy linear measurement that favours the lower-left mode, so
the true posterior is bimodal with unequal mode masses.  Posterior
densities are normalised by quadrature on a fine grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import logsumexp

from scoreprior.diffusion import DiffusionSpec, marginal_var
from scoreprior.inverse import LinearForwardModel, log_likelihood
from scoreprior.oracle import LOG2PI, grid_posterior_moments


@dataclass(frozen=True, eq=False)
class Mixture2D:
    """Isotropic Gaussian mixture in 2D."""

    means: np.ndarray
    std: float
    weights: np.ndarray

    def sample(self, n: int, seed=0) -> np.ndarray:
        rng = np.random.default_rng(seed)
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.std * rng.standard_normal((n, 2))

    def logpdf(self, x, extra_var: float = 0.0) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = self.std**2 + extra_var
        d2 = np.sum((x[:, None, :] - self.means[None]) ** 2, axis=-1)
        comp = -0.5 * d2 / v - np.log(2 * np.pi * v)
        return logsumexp(comp + np.log(self.weights), axis=1)


def bimodal_prior(separation: float = 1.0, std: float = 0.25) -> Mixture2D:
    m = separation * np.array([[-1.0, -1.0], [1.0, 1.0]])
    return Mixture2D(m, std, np.array([0.5, 0.5]))


@jax.tree_util.register_pytree_node_class
class MixtureScore:
    """Exact diffused score of an isotropic Gaussian mixture, in any dimension.

    Built from a :class:`Mixture2D` it is the reference for trained 2D
    fields; its divergence varies with x, unlike a Gaussian score's.
    """

    variant = "analytic-mixture"

    def __init__(self, means, std, log_weights, diffusion: DiffusionSpec):
        self.means = means
        self.std = std
        self.log_weights = log_weights
        self.diffusion = diffusion

    @classmethod
    def from_mixture(cls, mix: Mixture2D, diffusion: DiffusionSpec):
        return cls(jnp.asarray(mix.means), jnp.asarray(mix.std), jnp.log(jnp.asarray(mix.weights)), diffusion)

    def tree_flatten(self):
        return (self.means, self.std, self.log_weights), self.diffusion

    @classmethod
    def tree_unflatten(cls, diffusion, children):
        return cls(*children, diffusion)

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def __call__(self, x, t):
        v = self.std**2 + marginal_var(self.diffusion, t)
        diff = x - self.means
        logits = self.log_weights - 0.5 * jnp.sum(diff**2, axis=-1) / v
        w = jax.nn.softmax(logits)
        return -(w @ diff) / v


def bimodal_problem(y: float = -0.6, noise_sigma: float = 1.0) -> tuple[Mixture2D, LinearForwardModel]:
    """Prior plus the measurement y = x_1 + x_2 + noise."""
    prior = bimodal_prior()
    model = LinearForwardModel(np.array([[1.0, 1.0]]), noise_sigma, np.array([y]), kind="dense")
    return prior, model


class GridPosterior:
    """Unnormalised log-posterior normalised by 2D quadrature."""

    def __init__(self, log_unnorm, lo: float = -4.0, hi: float = 4.0, n: int = 801):
        self._f = log_unnorm
        self.log_z, self.mean, self.cov = grid_posterior_moments(log_unnorm, lo, hi, n)

    def logpdf(self, x) -> np.ndarray:
        return np.asarray(self._f(np.atleast_2d(x))) - self.log_z

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


def mixture_posterior(prior: Mixture2D, model: LinearForwardModel, **grid) -> GridPosterior:
    return GridPosterior(lambda x: prior.logpdf(x) + log_likelihood(model, x), **grid)


def gaussian_logpdf_2d(mu, cov):
    mu = np.asarray(mu, dtype=np.float64)
    inv = np.linalg.inv(cov)
    logdet = np.linalg.slogdet(cov)[1]

    def f(x):
        d = np.atleast_2d(x) - mu
        return -0.5 * (np.einsum("ni,ij,nj->n", d, inv, d) + logdet + 2 * LOG2PI)

    return f
