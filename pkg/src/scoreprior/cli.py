"""Command-line entry point: ``scoreprior <command> [options]``.

Every command takes ``--seed``, ``--threads`` and ``--config`` (a flat
key=value file whose keys are option names; flags given on the command
line win).  Each run also writes ``manifest.json`` with the fully resolved
options into ``<run-root>/<command>-seed<S>-<timestamp>/``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("scoreprior")

SOLVERS = ("euler", "heun", "bosh3", "tsit5", "dopri5", "dopri8")


def _floats(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str):
    return [int(v) for v in text.split(",") if v.strip()]


# -- parser ----------------------------------------------------------------------


def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap on CPU worker threads")
    p.add_argument("--config", default=None, help="key=value file; command-line flags override it")
    p.add_argument("--run-root", default="runs", help="parent directory of run directories")
    p.add_argument("-v", "--verbose", action="store_true")


def _score_opts(p, required=True):
    p.add_argument("--score", required=required, help="score checkpoint or Gaussian prior file")
    p.add_argument("--sigma-min", type=float, default=0.01, help="used when --score is a Gaussian prior")
    p.add_argument("--sigma-max", type=float, default=100.0, help="used when --score is a Gaussian prior")


def _solver_opts(p, method="dopri5"):
    p.add_argument("--solver", choices=SOLVERS, default=method)
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--dt", type=float, default=None, help="fixed step (required for euler)")
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--divergence", choices=("hutchinson", "exact"), default="hutchinson")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="scoreprior", description="Score-based priors for inverse problems.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-gaussian", help="fit a Gaussian prior to samples")
    p.add_argument("--samples", required=True)
    p.add_argument("--precond", type=float, default=0.01)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("train-score", help="train an MLP score by denoising score matching")
    p.add_argument("--data", required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--hidden", default="128,128,128")
    p.add_argument("--data-scale", type=float, default=1.0)
    p.add_argument("--sigma-min", type=float, default=0.01)
    p.add_argument("--sigma-max", type=float, default=None, help="default: largest pairwise data distance")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("logprob", help="log-density of images under the score prior")
    _score_opts(p)
    p.add_argument("--images", required=True)
    _solver_opts(p)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("grad-check", help="log-density gradients, optionally against a Gaussian oracle")
    _score_opts(p)
    p.add_argument("--images", required=True)
    p.add_argument("--engine", choices=("adjoint", "backprop"), default="adjoint")
    _solver_opts(p)
    p.add_argument("--prior", default=None, help="Gaussian prior file used as gradient oracle")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("bench-solvers", help="KL to the oracle for each ODE solver")
    _score_opts(p)
    p.add_argument("--prior", required=True, help="Gaussian prior file with the true density")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--solvers", default=",".join(SOLVERS))
    p.add_argument("--rtol", type=float, default=1e-5)
    p.add_argument("--atol", type=float, default=1e-5)
    p.add_argument("--probes", type=int, default=16)
    p.add_argument("--divergence", choices=("hutchinson", "exact"), default="hutchinson")
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("trace-study", help="spread of Hutchinson estimates over probe draws")
    _score_opts(p)
    p.add_argument("--image", required=True)
    p.add_argument("--K", default="1,2,4,8,16,32,64,128")
    p.add_argument("--trials", type=int, default=50)
    _solver_opts(p)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("simulate", help="simulate a noisy linear measurement")
    p.add_argument("--forward", choices=("denoise", "lowfreq", "sparsefreq"), required=True)
    p.add_argument("--side", type=int, default=None)
    p.add_argument("--fraction", type=float, default=0.0625)
    p.add_argument("--freqs", default=None, help="sparsefreq frequencies as k:l;k:l;...")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--convention", choices=("magnitude", "component"), default="magnitude")
    p.add_argument("--truth", default=None, help="image array; drawn from --prior when omitted")
    p.add_argument("--prior", default=None)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("sample-posterior", help="posterior samples by DPI or a baseline")
    p.add_argument("--method", choices=("dpi", "ald", "dps", "proj"), required=True)
    _score_opts(p)
    p.add_argument("--meas", required=True)
    p.add_argument("--n", type=int, default=128)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--clip", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--value", type=float, default=None, help="baseline weight (lambda, gamma or zeta)")
    p.add_argument("--n-steps", type=int, default=1000, help="baseline reverse steps or ALD levels")
    p.add_argument("--gamma-schedule", choices=("annealed", "renormalize"), default="annealed")
    _solver_opts(p)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("eval", help="restoration metrics and moment maps of a sample archive")
    p.add_argument("--samples", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--posterior-oracle", default=None, help="Gaussian file with the exact posterior")
    p.add_argument("--data-range", type=float, default=1.0)
    p.add_argument("--out", required=True)
    _common(p)

    p = sub.add_parser("bench-2d", help="2D comparison of DPI and tuned baselines")
    p.add_argument("--target", choices=("bimodal", "mismatch"), default="bimodal")
    p.add_argument("--score", default=None, help="2D score checkpoint (bimodal; trained when omitted)")
    p.add_argument("--grid", default=None, help="method=v1,v2,...;method=... overrides")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--dpi-steps", type=int, default=None)
    p.add_argument("--no-dpi", action="store_true")
    p.add_argument("--out", required=True)
    _common(p)
    return ap


# -- plumbing ----------------------------------------------------------------------


def _apply_config(parser, argv):
    """Parse, then re-parse with config-file values installed as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    from scoreprior.formats import read_config

    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    dests = {a.dest for a in sub._actions}
    unknown = [k for k in values if k.replace("-", "_") not in dests]
    if unknown:
        parser.error(f"unknown config keys: {', '.join(sorted(unknown))}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
    return parser.parse_args(argv)


def _limit_threads(n):
    if n is None:
        return
    if n < 1:
        raise SystemExit("error: --threads must be positive")
    flags = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = (
        f"{flags} --xla_cpu_multi_thread_eigen={'true' if n > 1 else 'false'} intra_op_parallelism_threads={n}"
    ).strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _run_dir(args) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(args.run_root) / f"{args.command}-seed{args.seed}-{stamp}"
    path, i = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{i}")
        i += 1
    path.mkdir(parents=True)
    manifest = {k: v for k, v in vars(args).items()}
    manifest["argv"] = sys.argv[1:]
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _need_file(path):
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


def _images(path):
    from scoreprior.formats import read_array

    a = read_array(_need_file(path))
    if a.ndim == 1:
        return a[None, :]
    return a.reshape(a.shape[0], -1)


def _load_score(args):
    """MLP checkpoint or Gaussian prior file, told apart by the magic bytes."""
    from scoreprior.diffusion import DiffusionSpec
    from scoreprior.oracle import PRIOR_MAGIC, load_prior
    from scoreprior.score import SCORE_MAGIC, GaussianScore, load_score

    path = _need_file(args.score)
    head = Path(path).read_bytes()[:8]
    if head.startswith(SCORE_MAGIC):
        return load_score(path)
    if head.startswith(PRIOR_MAGIC):
        return GaussianScore.from_prior(load_prior(path), DiffusionSpec(args.sigma_min, args.sigma_max))
    raise ValueError(f"{path}: neither a score checkpoint nor a Gaussian prior file")


def _check_dim(score, x, what="images"):
    from scoreprior.errors import ShapeError

    if x.shape[1] != score.dim:
        raise ShapeError(f"{what} have dimension {x.shape[1]}, score expects {score.dim}")


def _logprob_cfg(args, grad_mode="adjoint"):
    from scoreprior.density import LogProbConfig
    from scoreprior.odeint import SolverConfig

    if args.solver == "euler" and args.dt is None:
        args.dt = 1.0 / 1024
    fixed = args.dt if args.solver == "euler" or grad_mode == "backprop" else None
    solver = SolverConfig(args.solver, args.rtol, args.atol, fixed_dt=fixed)
    return LogProbConfig(solver, args.divergence, args.probes, grad_mode=grad_mode)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


# -- commands -----------------------------------------------------------------------


def cmd_fit_gaussian(args, run):
    from scoreprior.oracle import fit_gaussian, save_prior

    prior = fit_gaussian(_images(args.samples), args.precond)
    save_prior(args.out, prior)
    print(f"fitted N(mu, Sigma) in {prior.dim} dimensions -> {args.out}")


def cmd_train_score(args, run):
    import numpy as np

    from scoreprior.diffusion import DiffusionSpec, default_sigma_max
    from scoreprior.optim import OptimizerConfig
    from scoreprior.score import MlpSpec, save_score, train_dsm

    data = _images(args.data)
    if data.shape[1] != args.dim:
        from scoreprior.errors import ShapeError

        raise ShapeError(f"data has dimension {data.shape[1]}, --dim is {args.dim}")
    smax = args.sigma_max
    if smax is None:
        rng = np.random.default_rng(args.seed)
        sub = data[rng.permutation(len(data))[:2000]]
        smax = default_sigma_max(sub)
    spec = MlpSpec(args.dim, tuple(_ints(args.hidden)), data_scale=args.data_scale)
    score, losses = train_dsm(
        spec, data, DiffusionSpec(args.sigma_min, smax), OptimizerConfig(lr=args.lr, decay_steps=args.steps),
        seed=args.seed, steps=args.steps, batch=args.batch,
    )
    save_score(args.out, score)
    _write_csv(run / "loss.csv", ["epoch", "loss"], enumerate(float(v) for v in losses))
    print(f"trained score (sigma_max={smax:g}) -> {args.out}; losses in {run / 'loss.csv'}")


def cmd_logprob(args, run):
    from scoreprior.density import log_prob

    score = _load_score(args)
    x = _images(args.images)
    _check_dim(score, x)
    res = log_prob(score, x, _logprob_cfg(args), seed=args.seed)
    _write_csv(args.out, ["index", "logp", "nfe"], [(i, float(l), int(n)) for i, (l, n) in enumerate(zip(res.logp, res.nfe))])
    print(f"{len(x)} log-densities -> {args.out}")


def cmd_grad_check(args, run):
    import numpy as np

    from scoreprior.density import log_prob_and_grad
    from scoreprior.evaluate import cosine_distance

    score = _load_score(args)
    x = _images(args.images)
    _check_dim(score, x)
    res = log_prob_and_grad(score, x, _logprob_cfg(args, args.engine), seed=args.seed)
    oracle = None
    if args.prior:
        from scoreprior.oracle import load_prior

        prior = load_prior(_need_file(args.prior))
        oracle = -np.linalg.solve(prior.Sigma, (x - prior.mu).T).T
    rows, dists = [], []
    for i in range(len(x)):
        row = [i, float(res.logp[i]), float(np.linalg.norm(res.grad[i]))]
        if oracle is not None:
            dists.append(cosine_distance(res.grad[i], oracle[i]))
            row.append(dists[-1])
        rows.append(row)
    header = ["index", "logp", "grad_norm"] + (["cosine_distance"] if oracle is not None else [])
    _write_csv(args.out, header, rows)
    np.save(run / "grad.npy", res.grad)
    if dists:
        print(f"median cosine distance to closed form: {np.median(dists):.3g}")
    print(f"{len(x)} gradients ({args.engine}) -> {args.out}")


def cmd_bench_solvers(args, run):
    from scoreprior.evaluate import bench_solvers, default_bench_solvers, format_table
    from scoreprior.oracle import gaussian_logpdf, load_prior

    score = _load_score(args)
    prior = load_prior(_need_file(args.prior))
    if prior.dim != score.dim:
        from scoreprior.errors import ShapeError

        raise ShapeError("prior and score dimensions differ")
    wanted = [s.strip() for s in args.solvers.split(",") if s.strip()]
    bad = [s for s in wanted if s not in SOLVERS]
    if bad:
        raise ValueError(f"unknown solvers: {bad}")
    solvers = [c for c in default_bench_solvers(score.diffusion.t_eps, args.rtol, args.atol) if c.method in wanted]
    rows = bench_solvers(
        score, lambda v: gaussian_logpdf(prior, v), solvers, args.n, args.seed, args.divergence, args.probes
    )
    table = format_table(rows, ["solver", "kl", "kl_se", "nfe_lower_bound", "nfe", "seconds"])
    Path(args.out).write_text(table + "\n")
    print(table)


def cmd_trace_study(args, run):
    from scoreprior.density import grad_variance_study

    score = _load_score(args)
    x = _images(args.image)
    _check_dim(score, x, "image")
    rows = grad_variance_study(score, x, _logprob_cfg(args), _ints(args.K), args.trials, args.seed)
    keys = ["K", "mean_logp", "std_logp", "median_rel_grad_std"]
    _write_csv(args.out, keys, [[r[k] for k in keys] for r in rows])
    print(f"{len(rows)} probe counts -> {args.out}")


def cmd_simulate(args, run):
    import math

    from scoreprior.formats import write_measurement
    from scoreprior.inverse import complex_coefficients, denoise_model, lowfreq_dft_model, simulate_measurement
    from scoreprior.inverse import sparsefreq_model

    if args.truth:
        truth = _images(args.truth)[0]
    elif args.prior:
        from scoreprior.oracle import load_prior

        truth = load_prior(_need_file(args.prior)).sample(1, args.seed)[0]
    else:
        raise ValueError("give --truth or --prior")
    side = args.side or math.isqrt(truth.size)
    if args.forward == "denoise":
        model = denoise_model(truth.size, args.sigma)
    elif side * side != truth.size:
        from scoreprior.errors import ShapeError

        raise ShapeError(f"truth has {truth.size} pixels, not a {side}x{side} image")
    elif args.forward == "lowfreq":
        model = lowfreq_dft_model(side, args.fraction, args.sigma, args.convention)
    else:
        from scoreprior.formats import _parse_freqs

        if not args.freqs:
            raise ValueError("sparsefreq needs --freqs")
        model = sparsefreq_model(side, _parse_freqs(args.freqs), args.sigma, args.convention)
    model = simulate_measurement(model, truth, seed=args.seed)
    write_measurement(args.out, model, seed=args.seed)
    if args.forward == "denoise":
        print(f"recorded {model.n_meas} noisy pixels -> {args.out}")
    else:
        print(f"recorded {len(complex_coefficients(model))} complex coefficients -> {args.out}")


def cmd_sample_posterior(args, run):
    import numpy as np

    from scoreprior.formats import read_measurement, write_array

    score = _load_score(args)
    model, _ = read_measurement(_need_file(args.meas))
    if model.dim != score.dim:
        from scoreprior.errors import ShapeError

        raise ShapeError(f"measurement operator has dimension {model.dim}, score expects {score.dim}")
    if args.method == "dpi":
        from scoreprior.flow import FlowConfig, init_flow, save_flow
        from scoreprior.vi import DpiConfig, draw_posterior, fit, likelihood_fn, score_prior

        cfg = DpiConfig(
            batch=args.batch, lr=args.lr, clip_norm=args.clip, steps=args.steps, seed=args.seed,
            elbo_probes=_logprob_cfg(args),
        )
        flow = init_flow(FlowConfig(score.dim, args.layers, seed=args.seed))
        res = fit(flow, score_prior(score, cfg.elbo_probes), likelihood_fn(model), cfg)
        res.write_csv(run / "loss.csv")
        save_flow(run / "flow.bin", res.flow)
        x = draw_posterior(res.flow, args.n, seed=args.seed + 1, threshold=args.threshold)
        print(f"kept {len(x)}/{args.n} samples after |x| <= {args.threshold:g}; loss trace {run / 'loss.csv'}")
    else:
        from scoreprior.baselines import BaselineConfig, run_baseline

        method = "sde_proj" if args.method == "proj" else args.method
        cfg = BaselineConfig(method, n_steps=args.n_steps, gamma_schedule=args.gamma_schedule, seed=args.seed)
        if args.value is not None:
            cfg = cfg.with_value(args.value)
        x = run_baseline(score, model, cfg, args.n)
    write_array(args.out, np.asarray(x))
    print(f"{len(x)} samples -> {args.out}")


def cmd_eval(args, run):
    import math

    import numpy as np

    from scoreprior.evaluate import restoration_metrics
    from scoreprior.formats import write_pgm

    x = _images(args.samples)
    truth = _images(args.truth)[0]
    if x.shape[1] != truth.size:
        from scoreprior.errors import ShapeError

        raise ShapeError(f"samples have dimension {x.shape[1]}, truth has {truth.size}")
    if len(x) == 0:
        raise ValueError("sample archive is empty")
    mets = np.array([restoration_metrics(s, truth, args.data_range) for s in x])
    rows = [("mse", float(mets[:, 0].mean())), ("psnr", float(np.mean(mets[:, 1]))), ("ssim", float(mets[:, 2].mean()))]
    mean, std = x.mean(axis=0), x.std(axis=0, ddof=1) if len(x) > 1 else np.zeros(x.shape[1])
    side = math.isqrt(x.shape[1])
    if side * side == x.shape[1]:
        write_pgm(run / "mean.pgm", mean.reshape(side, side) / args.data_range)
        scale = std.max() if std.max() > 0 else 1.0
        write_pgm(run / "std.pgm", (std / scale).reshape(side, side))
    if args.posterior_oracle:
        from scoreprior.oracle import fit_gaussian, gaussian_kl, load_prior

        post = load_prior(_need_file(args.posterior_oracle))
        rows.append(("mean_rel_err", float(np.linalg.norm(mean - post.mu) / np.linalg.norm(post.mu))))
        true_std = np.sqrt(np.diag(post.Sigma))
        rows.append(("std_rel_err_max", float(np.max(np.abs(std - true_std) / true_std))))
        if len(x) > x.shape[1]:
            rows.append(("kl_gaussian_fit", gaussian_kl(fit_gaussian(x, precond=0.0), post)))
    _write_csv(args.out, ["metric", "value"], rows)
    for k, v in rows:
        print(f"{k}: {v:.6g}")


def cmd_bench_2d(args, run):
    from dataclasses import replace

    from scoreprior.evaluate import format_table
    from scoreprior import experiments as ex

    grids = None
    if args.grid:
        grids = {}
        for part in args.grid.split(";"):
            if part.strip():
                name, vals = part.split("=", 1)
                grids[name.strip()] = tuple(_floats(vals))
    if args.target == "bimodal":
        if args.score:
            from scoreprior.score import load_score

            score = load_score(_need_file(args.score))
            if score.dim != 2:
                raise ValueError("bench-2d needs a 2D score")
        else:
            score = ex.train_bimodal_score(seed=args.seed)
            from scoreprior.score import save_score

            save_score(run / "score.bin", score)
        cfg = ex.Bench2dConfig(n_samples=args.n, seed=args.seed)
        if grids:
            cfg = replace(cfg, grids={**cfg.grids, **grids})
        if args.dpi_steps:
            cfg = ex.replace_dpi(cfg, steps=args.dpi_steps)
        methods = tuple(m for m in ("sde_proj", "dps", "ald") if m in cfg.grids)
        rows = ex.bench_2d(score, cfg, methods, dpi=not args.no_dpi)
        cols = ["method", "value", "kl", "kl_se", "lower_mass", "seconds"]
    else:
        cfg = ex.MismatchConfig(n_samples=args.n, seed=args.seed)
        if grids:
            cfg = replace(cfg, grids={**cfg.grids, **grids})
        if args.dpi_steps:
            cfg = ex.replace_dpi(cfg, steps=args.dpi_steps)
        rows, std_true = ex.noise_mismatch(cfg, dpi=not args.no_dpi)
        print(f"analytic posterior std at high noise: {std_true}")
        cols = ["method", "value", "kl_low", "std_ratio_min", "std_ratio_max"]
    table = format_table(rows, cols)
    Path(args.out).write_text(table + "\n")
    print(table)


COMMANDS = {
    "fit-gaussian": cmd_fit_gaussian,
    "train-score": cmd_train_score,
    "logprob": cmd_logprob,
    "grad-check": cmd_grad_check,
    "bench-solvers": cmd_bench_solvers,
    "trace-study": cmd_trace_study,
    "simulate": cmd_simulate,
    "sample-posterior": cmd_sample_posterior,
    "eval": cmd_eval,
    "bench-2d": cmd_bench_2d,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = _apply_config(parser, argv)
    _limit_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    from scoreprior.errors import ScorePriorError

    try:
        run = _run_dir(args)
        COMMANDS[args.command](args, run)
    except (ScorePriorError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
