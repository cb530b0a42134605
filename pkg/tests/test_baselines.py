import math

import jax.numpy as jnp
import numpy as np
import pytest

from scoreprior.baselines import (
    BaselineConfig,
    hyperparameter_grid_search,
    run_baseline,
    tweedie_denoise,
)
from scoreprior.density import sample_reverse_sde
from scoreprior.diffusion import DiffusionSpec, marginal_var
from scoreprior.errors import ConfigError
from scoreprior.inverse import LinearForwardModel, simulate_measurement
from scoreprior.oracle import GaussianPrior, linear_gaussian_posterior
from scoreprior.score import GaussianScore

PRIOR = GaussianPrior(np.array([0.3, -0.2]), np.array([[1.0, 0.5], [0.5, 1.0]]))
SPEC = DiffusionSpec(0.01, 10.0)


def problem(sigma=0.3, a=None):
    a = np.eye(2) if a is None else a
    model = simulate_measurement(LinearForwardModel(a, sigma), np.array([0.5, -0.4]), seed=0)
    return GaussianScore.from_prior(PRIOR, SPEC), model


def test_with_value_targets_the_method_parameter():
    assert BaselineConfig("sde_proj").with_value(0.3).lambda_w == 0.3
    assert BaselineConfig("ald").with_value(2.0).gamma == 2.0
    assert BaselineConfig("dps", n_steps=7).with_value(0.5).zeta == 0.5
    assert BaselineConfig("dps", n_steps=7).with_value(0.5).n_steps == 7


def test_config_validation():
    for kw in (
        {"method": "other"},
        {"n_steps": 0},
        {"langevin_steps": 0},
        {"gamma_schedule": "x"},
        {"lambda_w": -1.0},
        {"ald_eps": 0.0},
    ):
        with pytest.raises(ConfigError):
            BaselineConfig(**kw)


@pytest.mark.parametrize("method", ["sde_proj", "dps", "ald"])
def test_input_checks(method):
    score, model = problem()
    with pytest.raises(ConfigError):
        run_baseline(score, LinearForwardModel(np.eye(2), 0.3), BaselineConfig(method, n_steps=2), 4)
    with pytest.raises(ConfigError):
        run_baseline(score, LinearForwardModel(np.eye(3), 0.3, np.zeros(3)), BaselineConfig(method, n_steps=2), 4)


def test_projection_needs_underdetermined_operator():
    score = GaussianScore.from_prior(PRIOR, SPEC)
    model = LinearForwardModel(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]), 0.3, np.zeros(3))
    with pytest.raises(ConfigError):
        run_baseline(score, model, BaselineConfig("sde_proj", n_steps=2), 4)


@pytest.mark.parametrize("method,value", [("sde_proj", 0.0), ("dps", 0.0)])
def test_zero_weight_is_unconditional(method, value):
    score, model = problem()
    x = run_baseline(score, model, BaselineConfig(method, n_steps=50, seed=3).with_value(value), 64)
    ref = sample_reverse_sde(score, 64, 50, seed=3)
    assert np.allclose(x, ref, atol=1e-12)


def test_full_projection_lands_on_the_measurement():
    score, model = problem(0.3)
    x = run_baseline(score, model, BaselineConfig("sde_proj", lambda_w=1.0, n_steps=100), 512)
    # the final projection targets y + sigma_bar(t_eps) z
    assert np.allclose(x.mean(0), model.y, atol=0.01)
    assert np.all(x.std(0) < 0.05)


def test_projection_skips_zero_rows():
    score = GaussianScore.from_prior(PRIOR, SPEC)
    a = np.array([[1.0, 1.0], [0.0, 0.0]])
    model = LinearForwardModel(a, 0.3, np.array([0.2, 0.0]))
    x = run_baseline(score, model, BaselineConfig("sde_proj", lambda_w=1.0, n_steps=50), 256)
    assert np.all(np.isfinite(x))
    assert abs(x.sum(1).mean() - 0.2) < 0.02


def test_tweedie_matches_gaussian_posterior_mean(rng):
    score = GaussianScore.from_prior(PRIOR, SPEC)
    for t in (0.1, 0.5, 0.9):
        v = float(marginal_var(SPEC, t))
        x = rng.standard_normal(2) * 3
        expect = PRIOR.mu + PRIOR.Sigma @ np.linalg.solve(PRIOR.Sigma + v * np.eye(2), x - PRIOR.mu)
        assert np.allclose(np.asarray(tweedie_denoise(score, jnp.asarray(x), t)), expect, atol=1e-10)


def test_ald_approximates_conjugate_posterior():
    score, model = problem(0.3)
    post = linear_gaussian_posterior(PRIOR, model)
    x = run_baseline(score, model, BaselineConfig("ald", gamma=1.0, n_steps=100), 4000)
    assert np.allclose(x.mean(0), post.mu, atol=0.05)
    assert np.allclose(x.std(0), np.sqrt(np.diag(post.Sigma)), rtol=0.15)


def test_ald_renormalize_runs():
    score, model = problem(0.3)
    x = run_baseline(score, model, BaselineConfig("ald", gamma=0.5, gamma_schedule="renormalize", n_steps=20), 64)
    assert np.all(np.isfinite(x))


def test_dps_pulls_towards_measurement():
    score, model = problem(0.3)
    free = run_baseline(score, model, BaselineConfig("dps", zeta=0.0, n_steps=100), 512)
    guided = run_baseline(score, model, BaselineConfig("dps", zeta=0.3, n_steps=100), 512)
    err = lambda x: np.mean(np.sum((x - model.y) ** 2, 1))  # noqa: E731
    assert err(guided) < 0.5 * err(free)


def test_samplers_are_seeded():
    score, model = problem()
    for method in ("sde_proj", "dps", "ald"):
        cfg = BaselineConfig(method, n_steps=10, seed=5)
        assert np.array_equal(run_baseline(score, model, cfg, 8), run_baseline(score, model, cfg, 8))


def test_grid_search_orders_by_kl():
    score, model = problem()
    table, best = hyperparameter_grid_search(
        score, model, BaselineConfig("sde_proj", n_steps=10), [0.0, 0.5, 1.0], lambda x: abs(x.mean() - 0.05), 32
    )
    assert [v for v, _ in table] != [] and best == table[0][0]
    assert table == sorted(table, key=lambda r: r[1])
    with pytest.raises(ConfigError):
        hyperparameter_grid_search(score, model, BaselineConfig("sde_proj", n_steps=10), [0.0], lambda x: math.nan, 8)
