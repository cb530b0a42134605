"""RealNVP-style affine-coupling flow used as the variational family.

Layer parameters are stacked along a leading axis so the whole flow is a
single ``lax.scan``.  Each coupling layer keeps the coordinates where
``mask == 1`` and transforms the rest:

    x = m * z + (1 - m) * (z * exp(s(m * z)) + b(m * z)),

with ``s = scale_clamp * tanh(raw)`` so log-scales stay bounded.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from scoreprior.errors import ConfigError, DivergedError, ShapeError
from scoreprior.optim import OptimizerConfig

FLOW_MAGIC = b"SPFL1"
LOG2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowConfig:
    dim: int
    n_layers: int = 16
    hidden: int | None = None  # defaults to max(64, 2 * dim)
    depth: int = 2
    scale_clamp: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigError("coupling flows need dim >= 2")
        if self.n_layers < 1 or self.depth < 1:
            raise ConfigError("n_layers and depth must be positive")
        if not self.scale_clamp > 0:
            raise ConfigError("scale_clamp must be positive")

    @property
    def width(self) -> int:
        return self.hidden or max(64, 2 * self.dim)


def alternating_masks(dim: int, n_layers: int, seed: int = 0) -> np.ndarray:
    """Half-split masks; odd layers take the complement of the layer before.

    Each even layer draws a fresh coordinate permutation (fixed by ``seed``)
    to decide which half passes through.
    """
    rng = np.random.default_rng(seed)
    masks = np.zeros((n_layers, dim))
    base = None
    for i in range(n_layers):
        if i % 2 == 0:
            perm = np.arange(dim) if i == 0 else rng.permutation(dim)
            base = np.zeros(dim)
            base[perm[: dim // 2]] = 1.0
            masks[i] = base
        else:
            masks[i] = 1.0 - base
    return masks


def _init_net(rng, d_in, width, depth, d_out):
    sizes = [d_in] + [width] * depth
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, (fan_in, fan_out)), np.zeros(fan_out)))
    # zero last layer: each coupling starts as the identity
    layers.append((np.zeros((width, d_out)), np.zeros(d_out)))
    return layers


def _net(params, h):
    for w, b in params[:-1]:
        h = jax.nn.leaky_relu(h @ w + b, 0.01)
    w, b = params[-1]
    return h @ w + b


@jax.tree_util.register_pytree_node_class
class FlowModel:
    """Stacked coupling layers over a standard-normal base."""

    def __init__(self, cfg: FlowConfig, params, masks):
        self.cfg = cfg
        self.params = params
        self.masks = masks

    def tree_flatten(self):
        return (self.params, self.masks), self.cfg

    @classmethod
    def tree_unflatten(cls, cfg, children):
        return cls(cfg, *children)

    @property
    def dim(self) -> int:
        return self.cfg.dim

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def replace_params(self, params) -> FlowModel:
        return FlowModel(self.cfg, params, self.masks)


def init_flow(cfg: FlowConfig) -> FlowModel:
    """A flow whose every layer is the identity map."""
    rng = np.random.default_rng(cfg.seed)
    layers = [
        {
            "scale": _init_net(rng, cfg.dim, cfg.width, cfg.depth, cfg.dim),
            "shift": _init_net(rng, cfg.dim, cfg.width, cfg.depth, cfg.dim),
        }
        for _ in range(cfg.n_layers)
    ]
    params = jax.tree_util.tree_map(lambda *a: jnp.asarray(np.stack(a)), *layers)
    masks = jnp.asarray(alternating_masks(cfg.dim, cfg.n_layers, cfg.seed))
    return FlowModel(cfg, params, masks)


def _coupling(cfg: FlowConfig, layer, m, z_pass):
    s = cfg.scale_clamp * jnp.tanh(_net(layer["scale"], z_pass)) * (1.0 - m)
    b = _net(layer["shift"], z_pass) * (1.0 - m)
    return s, b


def _forward_one(model: FlowModel, z):
    cfg = model.cfg

    def body(carry, inp):
        x, ld = carry
        layer, m = inp
        s, b = _coupling(cfg, layer, m, x * m)
        x = m * x + (1.0 - m) * (x * jnp.exp(s) + b)
        return (x, ld + jnp.sum(s)), None

    (x, ld), _ = jax.lax.scan(body, (z, jnp.zeros((), z.dtype)), (model.params, model.masks))
    return x, ld


def _inverse_one(model: FlowModel, x):
    cfg = model.cfg

    def body(carry, inp):
        z, ld = carry
        layer, m = inp
        s, b = _coupling(cfg, layer, m, z * m)
        z = m * z + (1.0 - m) * (z - b) * jnp.exp(-s)
        return (z, ld - jnp.sum(s)), None

    (z, ld), _ = jax.lax.scan(
        body, (x, jnp.zeros((), x.dtype)), (model.params, model.masks), reverse=True
    )
    return z, ld


@jax.jit
def _forward_batch(model, v):
    return jax.vmap(lambda r: _forward_one(model, r))(v)


@jax.jit
def _inverse_batch(model, v):
    return jax.vmap(lambda r: _inverse_one(model, r))(v)


_JITTED = {_forward_one: _forward_batch, _inverse_one: _inverse_batch}


def _batched(fn, model, v):
    v = jnp.asarray(v, dtype=jnp.float64)
    if v.shape[-1] != model.dim:
        raise ShapeError(f"input dim {v.shape[-1]} != flow dim {model.dim}")
    if v.ndim == 1:
        x, ld = _JITTED[fn](model, v[None])
        return x[0], ld[0]
    return _JITTED[fn](model, v)


def forward(model: FlowModel, z):
    """Map base samples to data space; returns ``(x, log|det dx/dz|)``."""
    return _batched(_forward_one, model, z)


def inverse(model: FlowModel, x):
    """Map data to base space; returns ``(z, log|det dz/dx|)``."""
    return _batched(_inverse_one, model, x)


def base_logpdf(z):
    return -0.5 * (jnp.sum(z**2, axis=-1) + z.shape[-1] * LOG2PI)


def sample_and_logq(model: FlowModel, n: int, seed: int = 0, key=None):
    """Draw ``n`` samples and their exact log-density under the flow."""
    if n < 1:
        raise ConfigError("n must be positive")
    key = jax.random.PRNGKey(seed) if key is None else key
    z = jax.random.normal(key, (n, model.dim), dtype=jnp.float64)
    x, ld = forward(model, z)
    return x, base_logpdf(z) - ld


def logq_of(model: FlowModel, x):
    """Exact log-density of ``x`` (vector or batch) under the flow."""
    z, ld = inverse(model, x)
    return base_logpdf(z) + ld


def fit_flow_mle(
    model: FlowModel,
    data,
    opt: OptimizerConfig | None = None,
    steps: int = 2000,
    batch: int = 256,
    seed: int = 0,
):
    """Maximum-likelihood training, for using a flow directly as a prior."""
    opt = opt or OptimizerConfig(lr=1e-3, clip_norm=1.0)
    data = jnp.asarray(data, dtype=jnp.float64)
    n = data.shape[0]
    tx = opt.build()

    def loss_fn(params, xb):
        return -jnp.mean(logq_of(model.replace_params(params), xb))

    @jax.jit
    def step(params, st, k):
        idx = jax.random.randint(k, (batch,), 0, n)
        loss, g = jax.value_and_grad(loss_fn)(params, data[idx])
        upd, st = tx.update(g, st, params)
        return jax.tree_util.tree_map(lambda a, u: a + u, params, upd), st, loss

    params, st = model.params, tx.init(model.params)
    key = jax.random.PRNGKey(seed)
    losses = []
    for k in jax.random.split(key, steps):
        params, st, loss = step(params, st, k)
        losses.append(float(loss))
        if not math.isfinite(losses[-1]):
            raise DivergedError(f"flow likelihood became non-finite at step {len(losses)}")
    return model.replace_params(params), losses


def save_flow(path, model: FlowModel) -> None:
    """``SPFL1 | u32 dim | u32 layers | u32 width | u32 depth | f64 clamp |
    u8 masks (layers x dim) | u64 count | f64 params`` (little-endian)."""
    cfg = model.cfg
    flat, _ = ravel_pytree(model.params)
    flat = np.asarray(flat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<IIIId", cfg.dim, cfg.n_layers, cfg.width, cfg.depth, cfg.scale_clamp))
        fh.write(np.asarray(model.masks, dtype=np.uint8).tobytes())
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_flow(path) -> FlowModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != FLOW_MAGIC:
        raise ValueError(f"{path}: not a flow checkpoint")
    dim, layers, width, depth, clamp = struct.unpack_from("<IIIId", blob, 5)
    off = 5 + 24
    masks = np.frombuffer(blob, np.uint8, layers * dim, off).reshape(layers, dim)
    off += layers * dim
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    flat = np.frombuffer(blob, "<f8", count, off)
    cfg = FlowConfig(dim, layers, width, depth, clamp)
    template = init_flow(cfg)
    _, unravel = ravel_pytree(template.params)
    return FlowModel(cfg, unravel(jnp.asarray(flat)), jnp.asarray(masks, dtype=jnp.float64))
