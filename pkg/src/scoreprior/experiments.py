"""End-to-end experiment drivers shared by the command line and the tests.

Each driver builds its problem from a seed, runs the methods being compared
and returns plain dict rows so callers can print, save or assert on them.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from scoreprior.baselines import BaselineConfig, run_baseline
from scoreprior.density import LogProbConfig
from scoreprior.diffusion import DiffusionSpec
from scoreprior.errors import DivergedError, NumericalError
from scoreprior.evaluate import kde_kl
from scoreprior.flow import FlowConfig, init_flow
from scoreprior.inverse import LinearForwardModel, lowfreq_dft_model, simulate_measurement
from scoreprior.odeint import SolverConfig
from scoreprior.optim import OptimizerConfig
from scoreprior.oracle import GaussianPrior, ground_truth_prior, linear_gaussian_posterior
from scoreprior.score import GaussianScore, MlpSpec, train_dsm
from scoreprior.toy2d import bimodal_problem, gaussian_logpdf_2d, mixture_posterior
from scoreprior.vi import DpiConfig, draw_posterior, fit, likelihood_fn, score_prior

log = logging.getLogger(__name__)

# One tuning value per baseline, five values each.  Values outside the
# stable range are kept on purpose: a run that diverges scores KL = inf.
BIMODAL_GRIDS = {
    "sde_proj": (0.0, 0.01, 0.03, 0.1, 0.3),
    "dps": (0.0, 0.1, 0.3, 1.0, 3.0),
    "ald": (0.3, 1.0, 2.0, 5.0, 10.0),
}

EXACT_2D = LogProbConfig(SolverConfig("dopri5", 1e-5, 1e-5), divergence="exact")


@dataclass(frozen=True)
class Bench2dConfig:
    """Settings of the 2D bimodal comparison."""

    y: float = -0.6
    noise_sigma: float = 1.0
    n_samples: int = 10000
    bandwidth: float = 0.03
    sde_steps: int = 250
    ald_levels: int = 100
    flow_layers: int = 32
    dpi: DpiConfig = field(default_factory=lambda: DpiConfig(steps=1500, plateau_tol=0.0, elbo_probes=EXACT_2D))
    grids: dict = field(default_factory=lambda: dict(BIMODAL_GRIDS))
    seed: int = 0


def train_bimodal_score(steps: int = 16000, batch: int = 256, seed: int = 0, n_data: int = 50000, lr: float = 5e-3):
    """Fit a small MLP score to samples of the bimodal prior (about 40 s on one core)."""
    prior, _ = bimodal_problem()
    data = prior.sample(n_data, seed=seed + 1)
    spec = MlpSpec(2, (64, 64, 64), data_scale=0.25)
    opt = OptimizerConfig(lr=lr, decay_steps=steps)
    score, _ = train_dsm(spec, data, DiffusionSpec(0.01, 10.0), opt, seed=seed, steps=steps, batch=batch)
    return score


def _mode_mass(x) -> float:
    return float(np.mean(np.sum(x, axis=1) < 0))


def bench_2d(score, cfg: Bench2dConfig | None = None, methods=("sde_proj", "dps", "ald"), dpi: bool = True):
    """KDE-based KL to the grid-normalised posterior for every method and grid value.

    Returns rows ``{method, value, kl, kl_se, lower_mass, seconds}``; the DPI
    row has ``value`` None.  Diverged baseline runs get ``kl = inf``.
    """
    cfg = cfg or Bench2dConfig()
    prior, model = bimodal_problem(cfg.y, cfg.noise_sigma)
    post = mixture_posterior(prior, model)
    rows = []
    for method in methods:
        n_steps = cfg.ald_levels if method == "ald" else cfg.sde_steps
        base = BaselineConfig(method, n_steps=n_steps, seed=cfg.seed)
        for v in cfg.grids[method]:
            t0 = time.perf_counter()
            try:
                x = run_baseline(score, model, base.with_value(v), cfg.n_samples)
                est = kde_kl(x, post.logpdf, cfg.bandwidth)
                kl, se, mass = est.kl, est.stderr, _mode_mass(x)
            except (DivergedError, NumericalError) as exc:
                log.info("%s %g: %s", method, v, exc)
                kl, se, mass = math.inf, math.nan, math.nan
            if not math.isfinite(kl):
                kl = math.inf
            rows.append(
                {"method": method, "value": float(v), "kl": kl, "kl_se": se, "lower_mass": mass,
                 "seconds": time.perf_counter() - t0}
            )
            log.info("bench-2d %s", rows[-1])
    if dpi:
        t0 = time.perf_counter()
        flow = init_flow(FlowConfig(2, cfg.flow_layers, seed=cfg.seed))
        dcfg = cfg.dpi
        res = fit(flow, score_prior(score, dcfg.elbo_probes), likelihood_fn(model), dcfg)
        x = draw_posterior(res.flow, cfg.n_samples, seed=cfg.seed + 1, threshold=None)
        est = kde_kl(x, post.logpdf, cfg.bandwidth)
        rows.append(
            {"method": "dpi", "value": None, "kl": est.kl, "kl_se": est.stderr, "lower_mass": _mode_mass(x),
             "seconds": time.perf_counter() - t0}
        )
        log.info("bench-2d %s", rows[-1])
    return rows


def best_per_method(rows) -> dict:
    """Minimum KL over the grid for each method."""
    out = {}
    for r in rows:
        out[r["method"]] = min(out.get(r["method"], math.inf), r["kl"])
    return out


# -- noise mismatch -----------------------------------------------------------


@dataclass(frozen=True)
class MismatchConfig:
    """Gaussian 2D prior observed through A = I at a low and a 10x higher noise."""

    low_sigma: float = 0.1
    factor: float = 10.0
    n_samples: int = 10000
    bandwidth: float = 0.03
    sde_steps: int = 250
    ald_levels: int = 100
    grids: dict = field(
        default_factory=lambda: {
            "sde_proj": (0.003, 0.01, 0.03, 0.1, 0.3),
            "dps": (0.03, 0.1, 0.3, 1.0, 3.0),
            "ald": (0.3, 1.0, 2.0, 5.0, 10.0),
        }
    )
    flow_layers: int = 16
    dpi: DpiConfig = field(default_factory=lambda: DpiConfig(steps=1500, plateau_tol=0.0, elbo_probes=EXACT_2D))
    seed: int = 0


def mismatch_prior() -> GaussianPrior:
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    return GaussianPrior(np.array([0.3, -0.2]), cov)


def noise_mismatch(cfg: MismatchConfig | None = None, methods=("sde_proj", "dps", "ald"), dpi: bool = True):
    """Tune each baseline at low noise, then rerun it at ``factor`` times the noise.

    Returns ``(rows, analytic_std_high)``; each row records the method, the
    tuned value, the low-noise KL and the per-coordinate sample std at the
    high noise level.
    """
    cfg = cfg or MismatchConfig()
    prior = mismatch_prior()
    score = GaussianScore.from_prior(prior, DiffusionSpec(0.01, 10.0))
    truth = prior.sample(1, cfg.seed)[0]
    eye = LinearForwardModel(np.eye(prior.dim), cfg.low_sigma, kind="dense")
    low = simulate_measurement(eye, truth, seed=cfg.seed + 1)
    high = simulate_measurement(eye.with_sigma(cfg.low_sigma * cfg.factor), truth, seed=cfg.seed + 2)
    post_low = linear_gaussian_posterior(prior, low)
    post_high = linear_gaussian_posterior(prior, high)
    logp_low = gaussian_logpdf_2d(post_low.mu, post_low.Sigma)
    std_high = np.sqrt(np.diag(post_high.Sigma))
    rows = []
    for method in methods:
        n_steps = cfg.ald_levels if method == "ald" else cfg.sde_steps
        base = BaselineConfig(method, n_steps=n_steps, seed=cfg.seed)
        table = []
        for v in cfg.grids[method]:
            try:
                kl = kde_kl(run_baseline(score, low, base.with_value(v), cfg.n_samples), logp_low, cfg.bandwidth).kl
            except (DivergedError, NumericalError):
                kl = math.inf
            table.append((kl if math.isfinite(kl) else math.inf, float(v)))
            log.info("mismatch tune %s %g: %g", method, v, table[-1][0])
        kl_low, best = min(table)
        x = run_baseline(score, high, base.with_value(best), cfg.n_samples)
        rows.append(_mismatch_row(method, best, kl_low, x, std_high))
    if dpi:
        flow = init_flow(FlowConfig(2, cfg.flow_layers, seed=cfg.seed))
        res = fit(flow, score_prior(score, cfg.dpi.elbo_probes), likelihood_fn(high), cfg.dpi)
        x = draw_posterior(res.flow, cfg.n_samples, seed=cfg.seed + 1, threshold=None)
        rows.append(_mismatch_row("dpi", None, math.nan, x, std_high))
    return rows, std_high


def _mismatch_row(method, value, kl_low, x, std_true):
    std = np.std(x, axis=0, ddof=1)
    ratio = std / std_true
    return {
        "method": method,
        "value": value,
        "kl_low": kl_low,
        "std_ratio_min": float(ratio.min()),
        "std_ratio_max": float(ratio.max()),
        "std": std.tolist(),
    }


# -- conjugate recovery ---------------------------------------------------------


@dataclass(frozen=True)
class ConjugateConfig:
    """DPI against the closed-form posterior of a Gaussian image prior."""

    side: int = 4
    fraction: float = 0.0625
    sigma_complex: float = 1.0
    sigma_max: float = 100.0
    n_samples: int = 10240
    flow_layers: int = 16
    dpi: DpiConfig = field(default_factory=lambda: DpiConfig(steps=2000, plateau_tol=0.0))
    seed: int = 0


def conjugate_recovery(cfg: ConjugateConfig | None = None):
    """Fit DPI with the score prior of a fitted Gaussian and compare moments.

    Returns a dict with the relative L2 error of the posterior mean, the
    per-coordinate relative std errors and the number of kept samples.
    """
    cfg = cfg or ConjugateConfig()
    prior = ground_truth_prior(side=cfg.side, seed=cfg.seed)
    score = GaussianScore.from_prior(prior, DiffusionSpec(0.01, cfg.sigma_max))
    truth = prior.sample(1, cfg.seed + 1)[0]
    model = simulate_measurement(
        lowfreq_dft_model(cfg.side, cfg.fraction, cfg.sigma_complex), truth, seed=cfg.seed + 2
    )
    post = linear_gaussian_posterior(prior, model)
    flow = init_flow(FlowConfig(prior.dim, cfg.flow_layers, seed=cfg.seed))
    t0 = time.perf_counter()
    res = fit(flow, score_prior(score, cfg.dpi.elbo_probes), likelihood_fn(model), cfg.dpi)
    x = draw_posterior(res.flow, cfg.n_samples, seed=cfg.seed + 3, threshold=2.0)
    mean = x.mean(axis=0)
    std = x.std(axis=0, ddof=1)
    std_true = np.sqrt(np.diag(post.Sigma))
    return {
        "mean_rel_err": float(np.linalg.norm(mean - post.mu) / np.linalg.norm(post.mu)),
        "std_rel_err": np.abs(std - std_true) / std_true,
        "n_kept": int(x.shape[0]),
        "seconds": time.perf_counter() - t0,
        "trace": res.trace,
    }


def replace_dpi(cfg, **kw):
    """Copy of an experiment config with DPI settings overridden."""
    return replace(cfg, dpi=replace(cfg.dpi, **kw))
