"""Score fields: the closed-form diffused-Gaussian score and a small MLP.

Both variants are JAX pytrees, so they can be passed straight into
compiled solvers; parameters are leaves and configuration is static.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from scoreprior.diffusion import DiffusionSpec, marginal_var, sigma
from scoreprior.errors import ConfigError, DivergedError, ShapeError
from scoreprior.optim import OptimizerConfig
from scoreprior.oracle import GaussianPrior

log = logging.getLogger(__name__)

SCORE_MAGIC = b"SPSF1"


def _check_dim(x, dim):
    if x.shape[-1] != dim:
        raise ShapeError(f"input has dim {x.shape[-1]}, field expects {dim}")


@jax.tree_util.register_pytree_node_class
class GaussianScore:
    """Exact score of N(mu, Sigma) diffused by the VE forward process.

    Uses the eigendecomposition Sigma = U diag(lam) U^T so that
    (Sigma + v I)^{-1} = U diag(1 / (lam + v)) U^T for every t.
    """

    variant = "analytic-gaussian"

    def __init__(self, mu, evecs, evals, diffusion: DiffusionSpec):
        self.mu = mu
        self.evecs = evecs
        self.evals = evals
        self.diffusion = diffusion

    @classmethod
    def from_prior(cls, prior: GaussianPrior, diffusion: DiffusionSpec):
        lam, u = prior.eigh
        return cls(jnp.asarray(prior.mu), jnp.asarray(u), jnp.asarray(lam), diffusion)

    def tree_flatten(self):
        return (self.mu, self.evecs, self.evals), self.diffusion

    @classmethod
    def tree_unflatten(cls, diffusion, children):
        return cls(*children, diffusion)

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    def __call__(self, x, t):
        _check_dim(x, self.dim)
        v = marginal_var(self.diffusion, t)
        coef = self.evecs.T @ (x - self.mu)
        return -self.evecs @ (coef / (self.evals + v))


@jax.tree_util.register_pytree_node_class
class ZeroScore:
    """s(x, t) = 0; the probability flow is then the identity map."""

    variant = "zero"

    def __init__(self, dim: int, diffusion: DiffusionSpec | None = None):
        self._dim = dim
        self.diffusion = diffusion or DiffusionSpec()

    def tree_flatten(self):
        return (), (self._dim, self.diffusion)

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*aux)

    @property
    def dim(self) -> int:
        return self._dim

    def __call__(self, x, t):
        _check_dim(x, self.dim)
        return jnp.zeros_like(x)


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the toy score network.

    The network sees ``x / sqrt(sigma(t)^2 + data_scale^2)`` together with
    ``time_features`` sine/cosine pairs of the normalised log noise level,
    and its output is divided by ``sqrt(sigma_bar(t)^2 + data_scale^2)``.
    """

    input_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    activation: str = "silu"
    time_features: int = 8
    data_scale: float = 1.0

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError("input_dim must be positive")
        if len(self.hidden) < 1 or any(w < 1 for w in self.hidden):
            raise ConfigError("need at least one hidden layer of positive width")
        if self.activation != "silu":
            raise ConfigError("only the smooth 'silu' activation is supported")
        if self.time_features < 1:
            raise ConfigError("time_features must be positive")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))


def init_mlp_params(spec: MlpSpec, key):
    """Fan-in uniform init for hidden layers; zero final layer."""
    sizes = [spec.input_dim + 2 * spec.time_features, *spec.hidden]
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        key, kw, kb = jax.random.split(key, 3)
        bound = 1.0 / math.sqrt(fan_in)
        w = jax.random.uniform(kw, (fan_in, fan_out), minval=-bound, maxval=bound)
        b = jax.random.uniform(kb, (fan_out,), minval=-bound, maxval=bound)
        params.append((w, b))
    params.append(
        (jnp.zeros((sizes[-1], spec.input_dim)), jnp.zeros((spec.input_dim,)))
    )
    return params


@jax.tree_util.register_pytree_node_class
class MlpScore:
    """Learned score s_theta(x, t) as a SiLU MLP."""

    variant = "mlp"

    def __init__(self, spec: MlpSpec, params, diffusion: DiffusionSpec):
        self.spec = spec
        self.params = params
        self.diffusion = diffusion

    def tree_flatten(self):
        return (self.params,), (self.spec, self.diffusion)

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(aux[0], children[0], aux[1])

    @property
    def dim(self) -> int:
        return self.spec.input_dim

    def _time_embedding(self, t):
        # log sigma(t) is affine in t, so t itself is the normalised log noise level.
        k = jnp.arange(1, self.spec.time_features + 1)
        ang = jnp.pi * k * t
        return jnp.concatenate([jnp.sin(ang), jnp.cos(ang)])

    def __call__(self, x, t):
        _check_dim(x, self.dim)
        if x.ndim > 1:
            return jax.vmap(lambda xi: self(xi, t))(x)
        s2 = self.spec.data_scale**2
        c_in = 1.0 / jnp.sqrt(sigma(self.diffusion, t) ** 2 + s2)
        c_out = 1.0 / jnp.sqrt(marginal_var(self.diffusion, t) + s2)
        h = jnp.concatenate([x * c_in, self._time_embedding(t)])
        for w, b in self.params[:-1]:
            h = jax.nn.silu(h @ w + b)
        w, b = self.params[-1]
        return (h @ w + b) * c_out


def eval_score(field, x, t):
    """Evaluate any score field; batches of rows are mapped over."""
    x = jnp.asarray(x)
    if x.ndim == 2:
        return jax.vmap(lambda xi: field(xi, t))(x)
    return field(x, t)


def dsm_loss(score: MlpScore, x0, t, eps):
    """sigma(t)^2-weighted denoising score matching loss, mean over a batch."""
    diff = score.diffusion
    sbar = jnp.sqrt(marginal_var(diff, t))
    xt = x0 + sbar[:, None] * eps
    s = jax.vmap(score)(xt, t)
    resid = s + eps / sbar[:, None]
    return jnp.mean(sigma(diff, t) ** 2 * jnp.sum(resid**2, axis=1))


def train_dsm(
    spec: MlpSpec,
    dataset,
    diffusion: DiffusionSpec,
    opt: OptimizerConfig | None = None,
    seed: int = 0,
    steps: int = 20000,
    batch: int = 128,
    steps_per_epoch: int | None = None,
):
    """Fit an MLP score field to ``dataset`` by denoising score matching.

    Returns ``(field, epoch_losses)`` where each entry is the mean loss over
    one epoch of ``steps_per_epoch`` updates (defaults to one pass over the
    data, at least one step).
    """
    opt = opt or OptimizerConfig(lr=1e-3)
    data = jnp.asarray(dataset, dtype=jnp.float64)
    if data.ndim != 2 or data.shape[1] != spec.input_dim:
        raise ShapeError(f"dataset shape {data.shape} does not match dim {spec.input_dim}")
    if data.shape[0] < 1:
        raise ShapeError("empty dataset")
    n = data.shape[0]
    epoch = steps_per_epoch or max(1, n // batch)
    key = jax.random.PRNGKey(seed)
    key, kinit = jax.random.split(key)
    score = MlpScore(spec, init_mlp_params(spec, kinit), diffusion)
    tx = opt.build()
    state = tx.init(score.params)

    def one_step(carry, k):
        params, st = carry
        ki, kt, ke = jax.random.split(k, 3)
        idx = jax.random.randint(ki, (batch,), 0, n)
        t = jax.random.uniform(
            kt, (batch,), minval=diffusion.t_eps, maxval=diffusion.t_horizon
        )
        eps = jax.random.normal(ke, (batch, spec.input_dim))
        loss, g = jax.value_and_grad(
            lambda p: dsm_loss(MlpScore(spec, p, diffusion), data[idx], t, eps)
        )(params)
        upd, st = tx.update(g, st, params)
        params = jax.tree_util.tree_map(lambda a, u: a + u, params, upd)
        return (params, st), loss

    @jax.jit
    def run_epoch(params, st, k, n_steps_key):
        keys = jax.random.split(k, n_steps_key.shape[0])
        (params, st), losses = jax.lax.scan(one_step, (params, st), keys)
        return params, st, jnp.mean(losses)

    params = score.params
    history = []
    done = 0
    while done < steps:
        m = min(epoch, steps - done)
        key, kep = jax.random.split(key)
        params, state, loss = run_epoch(params, state, kep, jnp.zeros(m))
        loss = float(loss)
        if not math.isfinite(loss):
            raise DivergedError(f"DSM loss became non-finite after {done + m} steps")
        history.append(loss)
        done += m
    log.info("DSM training: %d steps, first/last epoch loss %.4g / %.4g",
             steps, history[0], history[-1])
    return MlpScore(spec, params, diffusion), history


def save_score(path, field) -> None:
    """Write a score checkpoint.

    Layout (little-endian): ``SPSF1``, u8 variant (1 = mlp), u32 input_dim,
    u32 n_hidden, u32 widths..., u32 time_features, f64 data_scale,
    f64 sigma_min, f64 sigma_max, f64 t_eps, u64 n_params, f64 params.
    """
    if not isinstance(field, MlpScore):
        raise ConfigError("only MLP score fields have a checkpoint format")
    s, d = field.spec, field.diffusion
    flat, _ = ravel_pytree(field.params)
    flat = np.asarray(flat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(SCORE_MAGIC)
        fh.write(struct.pack("<BII", 1, s.input_dim, len(s.hidden)))
        fh.write(struct.pack(f"<{len(s.hidden)}I", *s.hidden))
        fh.write(struct.pack("<Id", s.time_features, s.data_scale))
        fh.write(struct.pack("<ddd", d.sigma_min, d.sigma_max, d.t_eps))
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_score(path) -> MlpScore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != SCORE_MAGIC:
        raise ValueError(f"{path}: not a score checkpoint")
    off = 5
    variant, dim, nh = struct.unpack_from("<BII", blob, off)
    off += 9
    if variant != 1:
        raise ValueError(f"{path}: unknown score variant {variant}")
    hidden = struct.unpack_from(f"<{nh}I", blob, off)
    off += 4 * nh
    tf, ds = struct.unpack_from("<Id", blob, off)
    off += 12
    smin, smax, teps = struct.unpack_from("<ddd", blob, off)
    off += 24
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    flat = np.frombuffer(blob, "<f8", count, off)
    spec = MlpSpec(dim, tuple(hidden), "silu", tf, ds)
    diffusion = DiffusionSpec(smin, smax, 1.0, teps)
    template = init_mlp_params(spec, jax.random.PRNGKey(0))
    _, unravel = ravel_pytree(template)
    return MlpScore(spec, unravel(jnp.asarray(flat)), diffusion)
