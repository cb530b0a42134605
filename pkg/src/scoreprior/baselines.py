"""Diffusion posterior samplers used as baselines: SDE+Proj, score-ALD and DPS.

All three take the same score field that the variational method uses and
a :class:`~scoreprior.inverse.LinearForwardModel` holding the measurement.
Each has one weighting hyperparameter (lambda, gamma, zeta) that has to be
tuned; :func:`hyperparameter_grid_search` does that against an oracle.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy import linalg

from scoreprior.density import sample_reverse_sde
from scoreprior.diffusion import marginal_var, sigma
from scoreprior.errors import ConfigError, DivergedError, NumericalError

log = logging.getLogger(__name__)

METHODS = ("sde_proj", "ald", "dps")


@dataclass(frozen=True)
class BaselineConfig:
    """Hyperparameters of the guided samplers.

    Attributes:
        lambda_w: projection weight for SDE+Proj (1 = full projection).
        gamma_schedule: ``"annealed"`` (gamma_t = gamma * sigma(t_i)) or
            ``"renormalize"`` (likelihood score rescaled to gamma times the
            prior-score norm) for ALD.
        gamma: ALD scale.
        zeta: DPS step scale.
        n_steps: reverse-SDE steps (SDE+Proj, DPS) or noise levels (ALD).
        langevin_steps: Langevin updates per ALD level.
        ald_eps: ALD base step size; level i uses 2 eps (sigma_i / sigma_L)^2.
    """

    method: str = "dps"
    lambda_w: float = 1.0
    gamma_schedule: str = "annealed"
    gamma: float = 1.0
    zeta: float = 1.0
    n_steps: int = 1000
    langevin_steps: int = 5
    ald_eps: float = 2e-5
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.n_steps < 1 or self.langevin_steps < 1:
            raise ConfigError("step counts must be positive")
        if self.gamma_schedule not in ("annealed", "renormalize"):
            raise ConfigError("gamma_schedule must be 'annealed' or 'renormalize'")
        if self.lambda_w < 0 or self.zeta < 0 or self.gamma < 0 or not self.ald_eps > 0:
            raise ConfigError("weights must be non-negative and ald_eps positive")

    def with_value(self, value: float) -> BaselineConfig:
        """Copy with the method's tuning hyperparameter set to ``value``."""
        name = {"sde_proj": "lambda_w", "ald": "gamma", "dps": "zeta"}[self.method]
        return BaselineConfig(**{**self.__dict__, name: float(value)})


def _check(model, score):
    if model.y is None:
        raise ConfigError("forward model has no measurement")
    if model.dim != score.dim:
        raise ConfigError(f"operator dim {model.dim} != score dim {score.dim}")


def _batched_score(score):
    return jax.vmap(score, in_axes=(0, None))


def sde_proj_sample(score, model, cfg: BaselineConfig, n: int):
    """Reverse SDE with a (partial) projection onto the noisy measurement set.

    After every step, x <- x + lambda A^H (A A^H)^{-1} (y_t - A x) with
    y_t = y + A (sigma_bar(t) z), a fresh perturbation of the measurement.
    Identically zero operator rows are left out of the projection.
    """
    _check(model, score)
    rows = model.active_rows()
    a = model.A[rows]
    if a.shape[0] > a.shape[1]:
        raise ConfigError("projection needs an underdetermined or square operator")
    try:
        cf = linalg.cho_factor(a @ a.T, lower=True)
        pinv = linalg.cho_solve(cf, np.eye(a.shape[0]))
    except linalg.LinAlgError as exc:
        raise NumericalError("A A^H is singular; cannot project") from exc
    proj = jnp.asarray(a.T @ pinv)
    a_j = jnp.asarray(a)
    y = jnp.asarray(model.y[rows])
    lam = cfg.lambda_w
    diff = score.diffusion

    def post_step(x, t, key):
        z = jax.random.normal(key, x.shape, dtype=x.dtype)
        y_t = y + (jnp.sqrt(marginal_var(diff, t)) * z) @ a_j.T
        return x + lam * (y_t - x @ a_j.T) @ proj.T

    return sample_reverse_sde(score, n, cfg.n_steps, seed=cfg.seed, post_step=post_step)


def ald_sample(score, model, cfg: BaselineConfig, n: int):
    """Annealed Langevin dynamics with an approximate posterior score.

    Levels t_i run uniformly from T to t_eps; at each, ``langevin_steps``
    updates x <- x + a_i (s(x, t_i) + l_i(x)) + sqrt(2 a_i) z with
    a_i = 2 eps (sigma_i / sigma_L)^2 and l_i the likelihood score.
    Raises :class:`DivergedError` naming the first level where the state
    became non-finite.
    """
    _check(model, score)
    diff = score.diffusion
    ts = jnp.linspace(diff.t_horizon, diff.t_eps, cfg.n_steps)
    sig = sigma(diff, ts)
    alphas = 2.0 * cfg.ald_eps * (sig / sig[-1]) ** 2
    a_j = jnp.asarray(model.A)
    y = jnp.asarray(model.y)
    s2 = model.noise_sigma**2
    batch_score = _batched_score(score)
    renorm = cfg.gamma_schedule == "renormalize"
    gamma = cfg.gamma

    def lik_score(x, sig_i):
        r = (y - x @ a_j.T) @ a_j
        if renorm:
            return r
        return r / (s2 + (gamma * sig_i) ** 2)

    def level(x, inp):
        t, sig_i, alpha, k = inp

        def one(x, kk):
            s = batch_score(x, t)
            ls = lik_score(x, sig_i)
            if renorm:
                ratio = jnp.linalg.norm(s, axis=1, keepdims=True) / jnp.maximum(
                    jnp.linalg.norm(ls, axis=1, keepdims=True), 1e-300
                )
                ls = gamma * ls * ratio
            z = jax.random.normal(kk, x.shape, dtype=x.dtype)
            return x + alpha * (s + ls) + jnp.sqrt(2.0 * alpha) * z, None

        x, _ = jax.lax.scan(one, x, jax.random.split(k, cfg.langevin_steps))
        return x, jnp.all(jnp.isfinite(x))

    key = jax.random.PRNGKey(cfg.seed)
    k0, kl = jax.random.split(key)
    x0 = diff.sigma_max * jax.random.normal(k0, (n, score.dim), dtype=jnp.float64)
    keys = jax.random.split(kl, cfg.n_steps)
    run = jax.jit(lambda x0: jax.lax.scan(level, x0, (ts, sig, alphas, keys)))
    x, finite = run(x0)
    finite = np.asarray(finite)
    if not finite.all():
        lvl = int(np.argmin(finite))
        raise DivergedError(f"ALD samples became non-finite at level {lvl}", level=lvl)
    return np.asarray(x)


def tweedie_denoise(score, x, t):
    """x_hat_0 = x + sigma_bar(t)^2 s(x, t), the posterior mean E[x_0 | x_t]."""
    return x + marginal_var(score.diffusion, t) * score(x, t)


def dps_sample(score, model, cfg: BaselineConfig, n: int):
    """Reverse SDE with gradient guidance through the Tweedie estimate.

    The mean update of each step is corrected by
    -zeta_t grad_x ||y - A x_hat_0(x)||^2 with zeta_t = zeta / ||y - A x_hat_0||;
    a sample whose residual is exactly zero skips guidance for that step.
    """
    _check(model, score)
    a_j = jnp.asarray(model.A)
    y = jnp.asarray(model.y)
    zeta = cfg.zeta

    def one_guidance(xi, t):
        def resid_sq(v):
            r = y - a_j @ tweedie_denoise(score, v, t)
            return jnp.sum(r**2)

        val, grad = jax.value_and_grad(resid_sq)(xi)
        norm = jnp.sqrt(val)
        step = jnp.where(norm > 0, zeta / jnp.where(norm > 0, norm, 1.0), 0.0)
        return -step * grad

    def guidance(x, t, s):
        return jax.vmap(one_guidance, in_axes=(0, None))(x, t)

    return sample_reverse_sde(score, n, cfg.n_steps, seed=cfg.seed, guidance=guidance)


SAMPLERS = {"sde_proj": sde_proj_sample, "ald": ald_sample, "dps": dps_sample}


def run_baseline(score, model, cfg: BaselineConfig, n: int):
    return SAMPLERS[cfg.method](score, model, cfg, n)


def hyperparameter_grid_search(score, model, cfg: BaselineConfig, grid, kl_fn, n_samples: int):
    """Run ``cfg.method`` at every grid value and score it with ``kl_fn(samples)``.

    Returns ``(table, best)`` where ``table`` is a list of
    ``(value, kl)`` sorted by KL (diverged runs get ``inf`` and sort last)
    and ``best`` is the argmin value.
    """
    rows = []
    for v in grid:
        try:
            samples = run_baseline(score, model, cfg.with_value(v), n_samples)
            kl = float(kl_fn(samples))
        except (DivergedError, NumericalError) as exc:
            log.info("%s at %g failed: %s", cfg.method, v, exc)
            kl = math.inf
        if not math.isfinite(kl):
            kl = math.inf
        rows.append((float(v), kl))
    if not rows or all(math.isinf(k) for _, k in rows):
        raise ConfigError(f"every {cfg.method} run in the grid diverged")
    rows.sort(key=lambda r: r[1])
    return rows, rows[0][0]
