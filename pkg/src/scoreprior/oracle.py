"""Closed-form ground truth: Gaussian priors, diffused densities, conjugate posteriors.

Everything here is plain NumPy/SciPy and deliberately independent of the
JAX code paths it is used to check.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import linalg, ndimage

from scoreprior.diffusion import DiffusionSpec, marginal_var
from scoreprior.errors import NumericalError, ShapeError

LOG2PI = float(np.log(2.0 * np.pi))
PRIOR_MAGIC = b"SPGP1"


@dataclass(eq=False)
class GaussianPrior:
    """N(mu, Sigma) with a cached Cholesky factor."""

    mu: np.ndarray
    Sigma: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
        d = self.mu.shape[0]
        if self.Sigma.shape != (d, d):
            raise ShapeError(f"Sigma shape {self.Sigma.shape} != ({d}, {d})")
        if not np.allclose(self.Sigma, self.Sigma.T, rtol=0, atol=1e-12):
            raise NumericalError("Sigma is not symmetric")
        self.Sigma = 0.5 * (self.Sigma + self.Sigma.T)
        try:
            self.chol = linalg.cholesky(self.Sigma, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError("covariance is not positive definite") from exc

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @cached_property
    def eigh(self):
        """Eigenvalues (ascending) and eigenvectors of Sigma."""
        return np.linalg.eigh(self.Sigma)

    def sample(self, n: int, rng) -> np.ndarray:
        rng = np.random.default_rng(rng)
        z = rng.standard_normal((n, self.dim))
        return self.mu + z @ self.chol.T

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def entropy(self) -> float:
        return 0.5 * (self.dim * (1.0 + LOG2PI) + self.logdet())


def fit_gaussian(samples, precond: float = 0.01) -> GaussianPrior:
    """Sample mean and covariance with ``precond`` added to the diagonal.

    For a single Gaussian component the EM fixed point is exactly the
    sample moments, so no iteration is needed.
    """
    x = np.asarray(samples, dtype=np.float64)
    n, d = x.shape
    if n < d + 1:
        raise ShapeError(f"need at least {d + 1} samples for dim {d}, got {n}")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, bias=False).reshape(d, d)
    return GaussianPrior(mu, cov + precond * np.eye(d))


def _diffused_cov(prior: GaussianPrior, spec: DiffusionSpec | None, t):
    if spec is None:
        return prior.Sigma
    return prior.Sigma + float(marginal_var(spec, t)) * np.eye(prior.dim)


def _logpdf(mu, cov, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mu.shape[0]:
        raise ShapeError(f"x has dim {x.shape[-1]}, prior has {mu.shape[0]}")
    c = linalg.cholesky(cov, lower=True)
    r = (x - mu).reshape(-1, mu.shape[0]).T
    w = linalg.solve_triangular(c, r, lower=True)
    maha = np.sum(w**2, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    out = -0.5 * (maha + logdet + mu.shape[0] * LOG2PI)
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else float(out[0])


def gaussian_logpdf(prior: GaussianPrior, x):
    """log N(x; mu, Sigma); accepts a vector or a batch of rows."""
    return _logpdf(prior.mu, prior.Sigma, x)


def diffused_logpdf(prior: GaussianPrior, spec: DiffusionSpec, x, t):
    """log density of x_t when x_0 ~ prior and x_t = x_0 + N(0, sigma_bar(t)^2 I)."""
    return _logpdf(prior.mu, _diffused_cov(prior, spec, t), x)


def diffused_score(prior: GaussianPrior, spec: DiffusionSpec, x, t):
    """Gradient of :func:`diffused_logpdf` in x."""
    cov = _diffused_cov(prior, spec, t)
    x = np.asarray(x, dtype=np.float64)
    r = (x - prior.mu).reshape(-1, prior.dim).T
    g = -linalg.cho_solve(linalg.cho_factor(cov, lower=True), r)
    return g.T.reshape(x.shape)


def linear_gaussian_posterior(prior: GaussianPrior, model) -> GaussianPrior:
    """Conjugate posterior for y = A x + noise with a Gaussian prior.

    ``model`` is any object exposing ``matrix()`` (real form, complex
    coefficients already split into real/imaginary rows), ``noise_sigma``
    (per real component) and ``y``.
    """
    a = np.asarray(model.matrix(), dtype=np.float64)
    y = np.asarray(model.y, dtype=np.float64)
    s2 = float(model.noise_sigma) ** 2
    try:
        prec_prior = linalg.cho_solve((prior.chol, True), np.eye(prior.dim))
        prec = prec_prior + a.T @ a / s2
        cf = linalg.cho_factor(prec, lower=True)
        cov = linalg.cho_solve(cf, np.eye(prior.dim))
    except linalg.LinAlgError as exc:
        raise NumericalError("posterior precision is singular") from exc
    mean = cov @ (prec_prior @ prior.mu + a.T @ y / s2)
    return GaussianPrior(mean, 0.5 * (cov + cov.T))


def gaussian_kl(p: GaussianPrior, q: GaussianPrior) -> float:
    """KL(p || q) between two Gaussians."""
    if p.dim != q.dim:
        raise ShapeError("dimension mismatch")
    q_inv_p = linalg.cho_solve((q.chol, True), p.Sigma)
    diff = q.mu - p.mu
    maha = float(diff @ linalg.cho_solve((q.chol, True), diff))
    kl = 0.5 * (np.trace(q_inv_p) + maha - p.dim + q.logdet() - p.logdet())
    return float(kl)


def grid_posterior_moments(log_unnorm, lo=-8.0, hi=8.0, n=801):
    """Normalizer, mean and covariance of a 2D density by grid quadrature.

    ``log_unnorm`` maps an (m, 2) array of points to unnormalized
    log-densities.  Returns ``(log_z, mean, cov)``.
    """
    g = np.linspace(lo, hi, n)
    dx = g[1] - g[0]
    xx, yy = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    lp = np.asarray(log_unnorm(pts), dtype=np.float64)
    m = lp.max()
    w = np.exp(lp - m)
    z = w.sum() * dx * dx
    w = w / w.sum()
    mean = w @ pts
    c = pts - mean
    cov = (c * w[:, None]).T @ c
    return float(np.log(z) + m), mean, cov


def smooth_random_images(n: int, side: int = 8, seed=0, smoothness: float | None = None):
    """Synthetic stand-in for a face dataset: smooth random fields in [0, 1].

    Each image is white noise blurred with a periodic Gaussian filter,
    normalised to unit variance, then mapped to mean 0.5 with a random
    global brightness offset and clipped to [0, 1].  Rows are flattened.
    The blur width defaults to ``0.15 * side`` pixels.
    """
    if smoothness is None:
        smoothness = 0.15 * side
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, side, side))
    field_ = ndimage.gaussian_filter(noise, sigma=(0, smoothness, smoothness), mode="wrap")
    field_ /= field_.reshape(n, -1).std(axis=1)[:, None, None]
    offset = 0.1 * rng.standard_normal((n, 1, 1))
    imgs = np.clip(0.5 + offset + 0.15 * field_, 0.0, 1.0)
    return imgs.reshape(n, side * side)


def ground_truth_prior(side: int = 8, n: int = 20000, seed=0, precond=0.01):
    """The reduced-scale Gaussian image prior used for validation."""
    return fit_gaussian(smooth_random_images(n, side, seed), precond)


def _lower_packed(sigma: np.ndarray) -> np.ndarray:
    return sigma[np.tril_indices(sigma.shape[0])]


def save_prior(path, prior: GaussianPrior) -> None:
    """Write ``SPGP1 | u32 dim | mu | packed lower-triangular Sigma`` (LE f64)."""
    with open(path, "wb") as fh:
        fh.write(PRIOR_MAGIC)
        fh.write(struct.pack("<I", prior.dim))
        fh.write(prior.mu.astype("<f8").tobytes())
        fh.write(_lower_packed(prior.Sigma).astype("<f8").tobytes())


def load_prior(path) -> GaussianPrior:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != PRIOR_MAGIC:
        raise ValueError(f"{path}: not a Gaussian prior file")
    (d,) = struct.unpack_from("<I", blob, 5)
    off = 9
    mu = np.frombuffer(blob, "<f8", d, off)
    off += 8 * d
    packed = np.frombuffer(blob, "<f8", d * (d + 1) // 2, off)
    sig = np.zeros((d, d))
    sig[np.tril_indices(d)] = packed
    sig = sig + np.tril(sig, -1).T
    return GaussianPrior(mu.copy(), sig)
