"""Variational posterior fitting with a normalizing flow.

The objective is the plain Monte Carlo estimate of

    E_{x ~ q}[-log p(y | x) - log p(x) + log q(x)]

with no weights on any term.  Priors are functions ``logp(x_batch, key)``
so that stochastic priors (Hutchinson probes) can draw fresh randomness
every step; likelihoods are functions ``loglik(x_batch)``.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from scoreprior.density import LogProbConfig, make_prior_logp, make_probes
from scoreprior.errors import ConfigError, DivergedError, NumericalError
from scoreprior.flow import FlowModel, logq_of, sample_and_logq
from scoreprior.optim import OptimizerConfig
from scoreprior.oracle import LOG2PI, GaussianPrior

log = logging.getLogger(__name__)

PRIOR_TAGS = ("score", "flow", "gaussian", "tv+entropy")


@dataclass(frozen=True)
class DpiConfig:
    """Training recipe for the variational flow.

    ``plateau_tol``: stop once the 500-step mean loss changes by less than
    this (relative) over ``plateau_window`` steps; 0 disables early stopping.
    """

    batch: int = 64
    lr: float = 2e-4
    clip_norm: float = 1.0
    steps: int = 20000
    seed: int = 0
    prior: str = "score"
    elbo_probes: LogProbConfig = field(default_factory=LogProbConfig)
    plateau_window: int = 2000
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.batch < 1:
            raise ConfigError("batch must be positive")
        if not self.lr > 0 or not self.clip_norm > 0:
            raise ConfigError("lr and clip_norm must be positive")
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.prior not in PRIOR_TAGS:
            raise ConfigError(f"prior must be one of {PRIOR_TAGS}")

    @property
    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(lr=self.lr, clip_norm=self.clip_norm)


# -- priors and likelihoods --------------------------------------------------


def score_prior(score, cfg: LogProbConfig | None = None):
    """Probability-flow log-density of a score field, differentiable in x."""
    cfg = cfg or LogProbConfig()
    lp = make_prior_logp(score, cfg)

    def logp(x, key):
        probes = None
        if cfg.divergence == "hutchinson":
            probes = make_probes(key, cfg.probes, score.dim, cfg.probe_dist)
        return lp(x, probes)

    return logp


def gaussian_prior(prior: GaussianPrior):
    mu = jnp.asarray(prior.mu)
    chol = jnp.asarray(prior.chol)
    logdet = prior.logdet()

    def logp(x, key=None):
        w = jax.scipy.linalg.solve_triangular(chol, (x - mu).T, lower=True)
        return -0.5 * (jnp.sum(w**2, axis=0) + logdet + prior.dim * LOG2PI)

    return logp


def flow_prior(flow: FlowModel):
    """Use a (pre-trained) flow density as the prior."""

    def logp(x, key=None):
        return logq_of(flow, x)

    return logp


def tv_entropy_prior(side: int, weight_tv: float = 10.0, weight_entropy: float = 1.0, flux: float | None = None):
    """Unnormalised classical regulariser: -w_tv TV(x) - w_ent sum x log(x / m).

    ``m`` is a flat image with total ``flux`` (defaults to the image's own
    total); pixels are softly floored at 1e-6 inside the logarithm.
    """

    def logp(x, key=None):
        img = x.reshape(x.shape[:-1] + (side, side))
        dx = jnp.diff(img, axis=-1)
        dy = jnp.diff(img, axis=-2)
        tv = jnp.sum(jnp.sqrt(dx[..., :-1, :] ** 2 + dy[..., :, :-1] ** 2 + 1e-8), axis=(-2, -1))
        pos = jnp.maximum(x, 1e-6)
        total = jnp.sum(pos, axis=-1, keepdims=True) if flux is None else flux
        ref = total / (side * side)
        ent = jnp.sum(pos * jnp.log(pos / ref), axis=-1)
        return -weight_tv * tv - weight_entropy * ent

    return logp


def likelihood_fn(model):
    """Gaussian log-likelihood of a :class:`LinearForwardModel` as a JAX function."""
    if model.y is None:
        raise ConfigError("forward model has no measurement")
    a = jnp.asarray(model.A)
    y = jnp.asarray(model.y)
    s2 = model.noise_sigma**2

    def loglik(x):
        r = y - x @ a.T
        return -0.5 * jnp.sum(r**2, axis=-1) / s2

    return loglik


def zero_likelihood(x):
    return jnp.zeros(x.shape[:-1], x.dtype)


# -- objective ---------------------------------------------------------------


def _terms(params, flow, prior_logp, lik_logp, key, n):
    kz, kp = jax.random.split(key)
    x, logq = sample_and_logq(flow.replace_params(params), n, key=kz)
    nll = -jnp.mean(lik_logp(x))
    nlp = -jnp.mean(prior_logp(x, kp))
    lq = jnp.mean(logq)
    return nll + nlp + lq, (nll, nlp, lq)


def elbo_loss(flow: FlowModel, prior_logp, lik_logp, batch_n: int = 64, seed: int = 0, key=None):
    """Monte Carlo objective over ``batch_n`` flow samples.

    Returns ``(loss, terms)`` with terms ``neg_loglik``, ``neg_logprior``
    and ``logq`` (batch means).
    """
    key = jax.random.PRNGKey(seed) if key is None else key
    loss, (nll, nlp, lq) = _terms(flow.params, flow, prior_logp, lik_logp, key, batch_n)
    terms = {"neg_loglik": float(nll), "neg_logprior": float(nlp), "logq": float(lq)}
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericalError(f"objective term {name} is non-finite")
    return float(loss), terms


@dataclass
class FitResult:
    flow: FlowModel
    trace: list  # rows of (step, loss, neg_loglik, neg_logprior, logq)
    stopped_early: bool = False

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "neg_loglik", "neg_logprior", "logq"])
            for row in self.trace:
                w.writerow([row[0]] + [f"{v:.10g}" for v in row[1:]])


def _plateaued(losses, window, tol):
    if tol <= 0 or len(losses) < window + 500:
        return False
    now = float(np.mean(losses[-500:]))
    then = float(np.mean(losses[-window - 500 : -window]))
    return abs(now - then) <= tol * max(abs(then), 1e-12)


def fit(flow: FlowModel, prior_logp, lik_logp, cfg: DpiConfig | None = None, callbacks=()) -> FitResult:
    """Minimise the objective with clipped Adam.

    Gradients reach the prior term through the reparameterised flow
    samples.  Updates with a non-finite loss are skipped; ten in a row
    raise :class:`~scoreprior.errors.DivergedError`.  Each callback is
    called as ``cb(step, loss, terms, flow_params)``.
    """
    cfg = cfg or DpiConfig()
    tx = cfg.optimizer.build()
    state = tx.init(flow.params)

    @jax.jit
    def step(params, st, key):
        (loss, terms), g = jax.value_and_grad(_terms, has_aux=True)(
            params, flow, prior_logp, lik_logp, key, cfg.batch
        )
        ok = jnp.isfinite(loss) & jnp.all(
            jnp.asarray([jnp.all(jnp.isfinite(v)) for v in jax.tree_util.tree_leaves(g)])
        )
        upd, new_st = tx.update(g, st, params)
        new_params = jax.tree_util.tree_map(lambda p, u: jnp.where(ok, p + u, p), params, upd)
        new_st = jax.tree_util.tree_map(lambda a, b: jnp.where(ok, a, b), new_st, st)
        return new_params, new_st, loss, terms

    params = flow.params
    key = jax.random.PRNGKey(cfg.seed)
    trace, losses = [], []
    bad = 0
    stopped = False
    for i in range(cfg.steps):
        key, k = jax.random.split(key)
        params, state, loss, terms = step(params, state, k)
        loss = float(loss)
        terms = tuple(float(t) for t in terms)
        trace.append((i, loss, *terms))
        if not math.isfinite(loss):
            bad += 1
            if bad >= 10:
                raise DivergedError(f"objective non-finite for 10 consecutive steps (step {i})")
            continue
        bad = 0
        losses.append(loss)
        for cb in callbacks:
            cb(i, loss, terms, params)
        if (i + 1) % 100 == 0 and _plateaued(losses, cfg.plateau_window, cfg.plateau_tol):
            log.info("objective plateaued at step %d", i)
            stopped = True
            break
    return FitResult(flow.replace_params(params), trace, stopped)


def postprocess_samples(samples, threshold: float = 2.0) -> np.ndarray:
    """Drop rows with any |entry| > threshold."""
    if not threshold > 0:
        raise ConfigError("threshold must be positive")
    s = np.asarray(samples)
    keep = np.all(np.abs(s) <= threshold, axis=1)
    if not keep.any():
        warnings.warn("postprocessing removed every sample; posterior is empty", RuntimeWarning, stacklevel=2)
    return s[keep]


def draw_posterior(flow: FlowModel, n: int, seed: int = 0, threshold: float | None = 2.0, chunk: int = 4096):
    """Sample the fitted flow, optionally with outlier rows removed."""
    key = jax.random.PRNGKey(seed)
    parts = []
    for i, start in enumerate(range(0, n, chunk)):
        x, _ = sample_and_logq(flow, min(chunk, n - start), key=jax.random.fold_in(key, i))
        parts.append(np.asarray(x))
    out = np.concatenate(parts)
    return out if threshold is None else postprocess_samples(out, threshold)
