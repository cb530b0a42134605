import math

import numpy as np
import pytest
from scipy import integrate, stats

from scoreprior.diffusion import DiffusionSpec
from scoreprior.errors import NumericalError, ShapeError
from scoreprior.inverse import LinearForwardModel
from scoreprior.oracle import (
    GaussianPrior,
    diffused_logpdf,
    diffused_score,
    fit_gaussian,
    gaussian_kl,
    gaussian_logpdf,
    grid_posterior_moments,
    ground_truth_prior,
    linear_gaussian_posterior,
    load_prior,
    save_prior,
    smooth_random_images,
)

from conftest import random_spd


def test_fit_gaussian_constant_samples():
    x = np.tile([0.3, -1.0, 2.0], (10, 1))
    p = fit_gaussian(x)
    assert np.allclose(p.mu, [0.3, -1.0, 2.0])
    assert np.allclose(p.Sigma, 0.01 * np.eye(3), atol=1e-15)


def test_fit_gaussian_standard_normal(rng):
    x = rng.standard_normal((100_000, 4))
    p = fit_gaussian(x)
    target = 1.01 * np.eye(4)
    assert np.linalg.norm(p.Sigma - target) / np.linalg.norm(target) < 0.05


def test_fit_gaussian_rank_deficient_without_precond():
    x = np.tile([1.0, 2.0], (10, 1))
    with pytest.raises(NumericalError):
        fit_gaussian(x, precond=0.0)


def test_fit_gaussian_needs_enough_rows():
    with pytest.raises(ShapeError):
        fit_gaussian(np.zeros((3, 3)))


def test_logpdf_standard_at_mean():
    p = GaussianPrior(np.zeros(2), np.eye(2))
    assert gaussian_logpdf(p, np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), rel=1e-14)


def test_logpdf_matches_scipy(gauss8, rng):
    x = rng.standard_normal((5, 8))
    ref = stats.multivariate_normal(gauss8.mu, gauss8.Sigma).logpdf(x)
    assert np.allclose(gaussian_logpdf(gauss8, x), ref, rtol=1e-12)


def test_diffused_score_at_t_eps_is_prior_gradient(gauss8, rng):
    spec = DiffusionSpec(1e-5, 10.0, t_eps=1e-3)
    x = rng.standard_normal(8)
    g0 = -np.linalg.solve(gauss8.Sigma, x - gauss8.mu)
    assert np.allclose(diffused_score(gauss8, spec, x, spec.t_eps), g0, atol=1e-6)


def test_diffused_score_is_gradient_of_diffused_logpdf(gauss8, rng, spec10):
    x = rng.standard_normal(8)
    t = 0.3
    h = 1e-5
    fd = np.array(
        [
            (diffused_logpdf(gauss8, spec10, x + h * e, t) - diffused_logpdf(gauss8, spec10, x - h * e, t)) / (2 * h)
            for e in np.eye(8)
        ]
    )
    assert np.allclose(diffused_score(gauss8, spec10, x, t), fd, atol=1e-7)


def test_diffused_logpdf_integrates_to_one_1d(spec10):
    p = GaussianPrior(np.array([0.4]), np.array([[0.7]]))
    val, _ = integrate.quad(lambda v: math.exp(diffused_logpdf(p, spec10, np.array([v]), 0.2)), -30, 30, epsabs=1e-12)
    assert val == pytest.approx(1.0, abs=1e-6)


def test_posterior_with_zero_operator_is_prior(gauss8):
    model = LinearForwardModel(np.zeros((3, 8)), 0.5, np.ones(3))
    post = linear_gaussian_posterior(gauss8, model)
    assert np.allclose(post.mu, gauss8.mu, atol=1e-12)
    assert np.allclose(post.Sigma, gauss8.Sigma, atol=1e-12)


def test_posterior_data_dominant_limit(gauss8, rng):
    y = rng.standard_normal(8)
    post = linear_gaussian_posterior(gauss8, LinearForwardModel(np.eye(8), 1e-6, y))
    assert np.allclose(post.mu, y, atol=1e-4)


def test_posterior_matches_grid_quadrature(rng):
    prior = GaussianPrior(rng.standard_normal(2) * 0.5, random_spd(2, rng, 0.3))
    model = LinearForwardModel(rng.standard_normal((1, 2)), 0.7, rng.standard_normal(1))
    post = linear_gaussian_posterior(prior, model)

    def log_unnorm(x):
        r = model.y - x @ model.A.T
        return gaussian_logpdf(prior, x) - 0.5 * np.sum(r**2, axis=1) / model.noise_sigma**2

    _, mean, cov = grid_posterior_moments(log_unnorm, -8, 8, 801)
    assert np.allclose(mean, post.mu, atol=1e-3)
    assert np.allclose(cov, post.Sigma, atol=1e-3)


def test_posterior_covariance_shrinks(gauss8, rng):
    model = LinearForwardModel(rng.standard_normal((4, 8)), 0.3, rng.standard_normal(4))
    post = linear_gaussian_posterior(gauss8, model)
    assert np.linalg.eigvalsh(gauss8.Sigma - post.Sigma).min() >= -1e-10


def test_gaussian_kl_values(rng):
    p = GaussianPrior(np.zeros(1), np.eye(1))
    q = GaussianPrior(np.ones(1), np.eye(1))
    assert gaussian_kl(p, p) == pytest.approx(0.0, abs=1e-14)
    assert gaussian_kl(p, q) == pytest.approx(0.5, rel=1e-14)
    for _ in range(100):
        a = GaussianPrior(rng.standard_normal(3), random_spd(3, rng))
        b = GaussianPrior(rng.standard_normal(3), random_spd(3, rng))
        assert gaussian_kl(a, b) >= 0


def test_gaussian_kl_matches_monte_carlo(rng):
    a = GaussianPrior(rng.standard_normal(2), random_spd(2, rng))
    b = GaussianPrior(rng.standard_normal(2), random_spd(2, rng))
    x = a.sample(200_000, rng)
    mc = np.mean(gaussian_logpdf(a, x) - gaussian_logpdf(b, x))
    assert mc == pytest.approx(gaussian_kl(a, b), rel=0.02, abs=0.01)


def test_smooth_images_in_range_and_deterministic():
    a = smooth_random_images(20, side=8, seed=3)
    b = smooth_random_images(20, side=8, seed=3)
    assert a.shape == (20, 64)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_ground_truth_prior_is_positive_definite():
    p = ground_truth_prior(side=4, n=2000)
    assert p.dim == 16
    assert np.linalg.eigvalsh(p.Sigma).min() >= 0.01 - 1e-12


def test_prior_file_round_trip(tmp_path, gauss8):
    path = tmp_path / "prior.bin"
    save_prior(path, gauss8)
    back = load_prior(path)
    assert np.array_equal(back.mu, gauss8.mu)
    assert np.array_equal(back.Sigma, gauss8.Sigma)
    assert path.read_bytes()[:5] == b"SPGP1"


def test_prior_file_rejects_other_formats(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOPE!....")
    with pytest.raises(ValueError):
        load_prior(path)
