import math

import numpy as np
import pytest

import scoreprior  # noqa: F401  (enables float64 in JAX)
from scoreprior.diffusion import DiffusionSpec, marginal_var
from scoreprior.oracle import GaussianPrior


def random_spd(dim, rng, floor=0.1):
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + floor * np.eye(dim)


def flow_model_logp(prior: GaussianPrior, spec: DiffusionSpec, x):
    """Closed-form log-density implied by the probability flow of a Gaussian.

    In the eigenbasis of Sigma each coordinate moves as sqrt(lam + v(t)),
    so x_T and the log-Jacobian are explicit; the terminal density is the
    VE Gaussian N(0, sigma_max^2 I), not the true p_T.
    """
    lam, u = prior.eigh
    v0 = float(marginal_var(spec, spec.t_eps))
    v1 = float(marginal_var(spec, spec.t_horizon))
    scale = np.sqrt((lam + v1) / (lam + v0))
    c = (np.atleast_2d(x) - prior.mu) @ u
    x_t = prior.mu + (c * scale) @ u.T
    d = prior.dim
    term = -0.5 * (np.sum(x_t**2, axis=1) / spec.sigma_max**2 + d * math.log(2 * math.pi * spec.sigma_max**2))
    return term + np.sum(np.log(scale))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def spec10():
    return DiffusionSpec(0.01, 10.0)


@pytest.fixture
def gauss8(rng):
    return GaussianPrior(rng.standard_normal(8) * 0.5, random_spd(8, rng))
