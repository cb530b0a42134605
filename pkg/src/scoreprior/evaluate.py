"""Sample-based evaluation: KDE, KL estimates, restoration metrics, solver tables."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from skimage.metrics import structural_similarity

from scoreprior.density import LogProbConfig, log_prob, ode_sample
from scoreprior.errors import ConfigError, ScorePriorError, ShapeError
from scoreprior.odeint import TABLEAUS, SolverConfig, n_fixed_steps

log = logging.getLogger(__name__)


def kde_logpdf(samples, bandwidth: float, query, chunk: int = 2048) -> np.ndarray:
    """Log-density of an isotropic Gaussian KDE at ``query`` points."""
    s = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    q = np.atleast_2d(np.asarray(query, dtype=np.float64))
    if not bandwidth > 0:
        raise ConfigError("bandwidth must be positive")
    if s.shape[0] == 0:
        raise ConfigError("no samples")
    if s.shape[1] != q.shape[1]:
        raise ShapeError("samples and query differ in dimension")
    n, d = s.shape
    norm = -math.log(n) - 0.5 * d * math.log(2.0 * math.pi * bandwidth**2)
    s_sq = np.sum(s**2, axis=1)
    out = np.empty(q.shape[0])
    for i in range(0, q.shape[0], chunk):
        qb = q[i : i + chunk]
        d2 = np.sum(qb**2, axis=1)[:, None] + s_sq[None, :] - 2.0 * qb @ s.T
        out[i : i + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0) / bandwidth**2, axis=1) + norm
    return out


@dataclass
class KlEstimate:
    kl: float
    stderr: float
    n_used: int
    n_dropped: int

    def __float__(self):
        return self.kl


def sample_kl(q_samples, logq, logp) -> KlEstimate:
    """Monte Carlo KL(q || p) = mean over q-samples of log q - log p.

    ``logq`` and ``logp`` are either callables on the sample matrix or
    precomputed arrays.  Non-finite terms are dropped and counted.
    """
    x = np.asarray(q_samples)
    if x.shape[0] == 0:
        raise ConfigError("no samples")
    lq = np.asarray(logq(x) if callable(logq) else logq, dtype=np.float64)
    lp = np.asarray(logp(x) if callable(logp) else logp, dtype=np.float64)
    diff = lq - lp
    ok = np.isfinite(diff)
    dropped = int((~ok).sum())
    if dropped > 0.1 * diff.size:
        warnings.warn(f"dropped {dropped}/{diff.size} non-finite KL terms", RuntimeWarning, stacklevel=2)
    if not ok.any():
        return KlEstimate(math.nan, math.nan, 0, dropped)
    d = diff[ok]
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else math.nan
    return KlEstimate(float(d.mean()), se, int(d.size), dropped)


def kde_kl(q_samples, logp, bandwidth: float = 0.03) -> KlEstimate:
    """KL(q || p) with q replaced by a KDE of its own samples."""
    x = np.asarray(q_samples)
    return sample_kl(x, kde_logpdf(x, bandwidth, x), logp)


def restoration_metrics(estimate, truth, data_range: float = 1.0):
    """``(mse, psnr, ssim)``; images are 2D arrays (or flattened squares)."""
    est = np.asarray(estimate, dtype=np.float64)
    tru = np.asarray(truth, dtype=np.float64)
    if est.shape != tru.shape:
        raise ShapeError(f"shape mismatch {est.shape} vs {tru.shape}")
    if not data_range > 0:
        raise ConfigError("data_range must be positive")
    if est.ndim == 1:
        side = math.isqrt(est.size)
        if side * side != est.size:
            raise ShapeError("flattened images must be square")
        est, tru = est.reshape(side, side), tru.reshape(side, side)
    mse = float(np.mean((est - tru) ** 2))
    psnr = math.inf if mse == 0 else 10.0 * math.log10(data_range**2 / mse)
    win = min(7, min(est.shape) - (1 - min(est.shape) % 2))
    ssim = float(
        structural_similarity(est, tru, data_range=data_range, win_size=win, gaussian_weights=False)
    )
    return mse, psnr, ssim


def r_squared(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError("length mismatch")
    ss_res = np.sum((truth - pred) ** 2)
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    return float(1.0 - ss_res / ss_tot)


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ConfigError("cosine distance undefined for a zero vector")
    return float(1.0 - a @ b / (na * nb))


def default_bench_solvers(t_eps: float = 1e-3, rtol: float = 1e-5, atol: float = 1e-5):
    """Euler with exactly 4092 steps over [t_eps, 1] plus the adaptive methods."""
    euler = SolverConfig("euler", fixed_dt=(1.0 - t_eps) / 4092)
    adaptive = [SolverConfig(m, rtol, atol) for m in ("heun", "bosh3", "tsit5", "dopri5", "dopri8")]
    return [euler, *adaptive]


def _solver_label(cfg: SolverConfig) -> str:
    if cfg.adaptive:
        return cfg.method
    return f"{cfg.method}*"


def bench_solvers(
    score,
    oracle_logpdf,
    solvers=None,
    n_samples: int = 512,
    seed: int = 0,
    divergence: str = "hutchinson",
    probes: int = 16,
    reference: SolverConfig | None = None,
):
    """KL(model || truth) estimated with each solver on the same ODE-sampler draws.

    Returns a list of dict rows with ``solver``, ``kl``, ``kl_se``,
    ``nfe_lower_bound`` (mean accepted steps x order), ``nfe`` (mean stage
    evaluations) and ``seconds``.  A failing solver yields a row with an
    ``error`` entry instead of aborting the table.
    """
    diff = score.diffusion
    solvers = solvers or default_bench_solvers(diff.t_eps)
    reference = reference or SolverConfig("dopri5", 1e-7, 1e-7)
    x, _ = ode_sample(score, n_samples, reference, seed=seed)
    lp_true = np.asarray(oracle_logpdf(x))
    rows = []
    for cfg in solvers:
        label = _solver_label(cfg)
        t0 = time.perf_counter()
        try:
            res = log_prob(score, x, LogProbConfig(cfg, divergence, probes), seed=seed + 1)
            est = sample_kl(x, res.logp, lp_true)
            order = TABLEAUS[cfg.method].order
            if cfg.adaptive:
                steps = float(np.mean(res.accepted))
            else:
                steps = float(n_fixed_steps(diff.t_eps, diff.t_horizon, cfg.fixed_dt))
            rows.append(
                {
                    "solver": label,
                    "kl": est.kl,
                    "kl_se": est.stderr,
                    "nfe_lower_bound": steps * order,
                    "nfe": float(np.mean(res.nfe)),
                    "seconds": time.perf_counter() - t0,
                }
            )
        except ScorePriorError as exc:
            rows.append({"solver": label, "error": str(exc), "seconds": time.perf_counter() - t0})
        log.info("bench %s: %s", label, rows[-1])
    return rows


def format_table(rows, columns) -> str:
    """Aligned plain-text (markdown) table."""
    cells = [[_fmt(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    line = "| " + " | ".join(c.ljust(w) for c, w in zip(columns, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    body = ["| " + " | ".join(v.ljust(w) for v, w in zip(row, widths)) + " |" for row in cells]
    return "\n".join([line, sep, *body])


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
