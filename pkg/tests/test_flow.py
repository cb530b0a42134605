import jax
import jax.numpy as jnp
import numpy as np
import pytest

from scoreprior.errors import ConfigError, ShapeError
from scoreprior.flow import (
    FlowConfig,
    alternating_masks,
    fit_flow_mle,
    forward,
    init_flow,
    inverse,
    load_flow,
    logq_of,
    sample_and_logq,
    save_flow,
)
from scoreprior.optim import OptimizerConfig


def perturbed(cfg, scale=0.05, seed=7):
    """A flow with random (non-identity) parameters in every layer."""
    model = init_flow(cfg)
    leaves, tree = jax.tree_util.tree_flatten(model.params)
    keys = jax.random.split(jax.random.PRNGKey(seed), len(leaves))
    leaves = [p + scale * jax.random.normal(k, p.shape) for p, k in zip(leaves, keys)]
    return model.replace_params(jax.tree_util.tree_unflatten(tree, leaves))


def test_init_is_identity(rng):
    model = init_flow(FlowConfig(5, 4))
    z = rng.standard_normal((10, 5))
    x, ld = forward(model, z)
    assert np.array_equal(np.asarray(x), z)
    assert np.all(np.asarray(ld) == 0)


@pytest.mark.parametrize("dim,layers", [(2, 8), (5, 16), (16, 16)])
def test_invertibility(rng, dim, layers):
    model = perturbed(FlowConfig(dim, layers))
    z = rng.standard_normal((64, dim))
    x, ld = forward(model, z)
    z2, ld_inv = inverse(model, x)
    assert np.max(np.abs(np.asarray(z2) - z)) <= 1e-9
    assert np.allclose(np.asarray(ld) + np.asarray(ld_inv), 0, atol=1e-9)
    assert not np.allclose(np.asarray(x), z)


def test_logdet_matches_jacobian(rng):
    model = perturbed(FlowConfig(2, 8))
    z = rng.standard_normal((6, 2))
    _, ld = forward(model, z)
    h = 1e-6
    for zi, li in zip(z, np.asarray(ld)):
        jac = np.stack(
            [(np.asarray(forward(model, zi + h * e)[0]) - np.asarray(forward(model, zi - h * e)[0])) / (2 * h)
             for e in np.eye(2)],
            axis=1,
        )
        assert abs(np.log(abs(np.linalg.det(jac))) - li) <= 1e-6


def test_logdet_matches_autodiff_jacobian(rng):
    model = perturbed(FlowConfig(6, 8))
    z = jnp.asarray(rng.standard_normal(6))
    jac = jax.jacfwd(lambda v: forward(model, v)[0])(z)
    _, ld = forward(model, z)
    assert float(ld) == pytest.approx(np.linalg.slogdet(np.asarray(jac))[1], abs=1e-10)


def test_sample_logq_consistent(rng):
    model = perturbed(FlowConfig(4, 6))
    x, lq = sample_and_logq(model, 32, seed=3)
    assert np.allclose(np.asarray(logq_of(model, x)), np.asarray(lq), atol=1e-9)


def test_logq_normalises_in_2d():
    model = perturbed(FlowConfig(2, 4), scale=0.01)
    g = np.linspace(-8, 8, 401)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], 1)
    mass = np.exp(np.asarray(logq_of(model, pts))).sum() * (g[1] - g[0]) ** 2
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_sampling_determinism():
    model = perturbed(FlowConfig(3, 4))
    a = sample_and_logq(model, 8, seed=11)[0]
    b = sample_and_logq(model, 8, seed=11)[0]
    c = sample_and_logq(model, 8, seed=12)[0]
    assert np.array_equal(np.asarray(a), np.asarray(b))
    assert not np.array_equal(np.asarray(a), np.asarray(c))


def test_masks_alternate():
    m = alternating_masks(7, 6, seed=2)
    assert m.shape == (6, 7)
    assert np.all(m[1::2] == 1 - m[0::2])
    assert np.all(m.sum(1)[0::2] == 3)


def test_scale_clamp_bounds_logdet(rng):
    cfg = FlowConfig(4, 3, scale_clamp=0.5)
    model = perturbed(cfg, scale=5.0)
    _, ld = forward(model, rng.standard_normal((50, 4)))
    # each layer changes at most dim/2 coordinates by at most the clamp
    assert np.all(np.abs(np.asarray(ld)) <= 3 * 2 * 0.5 + 1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        FlowConfig(1)
    with pytest.raises(ConfigError):
        FlowConfig(2, n_layers=0)
    with pytest.raises(ConfigError):
        FlowConfig(2, scale_clamp=0.0)
    with pytest.raises(ConfigError):
        sample_and_logq(init_flow(FlowConfig(2)), 0)


def test_checkpoint_roundtrip(tmp_path, rng):
    model = perturbed(FlowConfig(3, 5, hidden=16))
    path = tmp_path / "flow.bin"
    save_flow(path, model)
    back = load_flow(path)
    z = rng.standard_normal((4, 3))
    assert np.array_equal(np.asarray(forward(model, z)[0]), np.asarray(forward(back, z)[0]))
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_flow(tmp_path / "bad.bin")


def test_mle_fit_learns_gaussian(rng):
    cov = np.array([[1.0, 0.8], [0.8, 1.0]])
    data = rng.multivariate_normal([1.0, -1.0], cov, 4000)
    model, losses = fit_flow_mle(init_flow(FlowConfig(2, 4, hidden=32)), data, OptimizerConfig(lr=3e-3), steps=2000)
    x, _ = sample_and_logq(model, 4000, seed=0)
    x = np.asarray(x)
    assert np.allclose(x.mean(0), [1.0, -1.0], atol=0.1)
    assert np.allclose(np.cov(x, rowvar=False), cov, atol=0.15)
    assert losses[-1] < losses[0]
