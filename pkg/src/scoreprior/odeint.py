"""Explicit Runge-Kutta integrators with function-evaluation accounting.

Solvers are written against plain JAX so they compile to a single
``while_loop`` (adaptive) or ``scan`` (fixed step), and can be vmapped
over a batch of initial conditions.  :func:`solve` is the traceable core;
:func:`integrate` is the checked, user-facing wrapper.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree
from scipy.integrate._ivp import dop853_coefficients as _dop853

from scoreprior.errors import ConfigError, NoConvergenceError, NumericalError

STATUS_OK, STATUS_MAX_STEPS, STATUS_NONFINITE = 0, 1, 2


@dataclass(frozen=True)
class Tableau:
    """Butcher tableau of an explicit (optionally embedded) RK method.

    ``a[i]`` holds the i coefficients of stage i (stage 0 has none).  For
    FSAL methods the last stage is evaluated at the new solution and its
    derivative is reused as the first stage of the next step.
    ``err`` holds the weights of ``y1 - y1_embedded``.
    """

    name: str
    c: tuple
    a: tuple
    b: tuple
    err: tuple | None
    order: int
    err_order: int
    fsal: bool

    @property
    def stages(self) -> int:
        return len(self.c)

    @property
    def evals_per_step(self) -> int:
        """New field evaluations per step once the first stage is cached."""
        return self.stages - 1 if self.fsal else self.stages


EULER = Tableau("euler", (0.0,), ((),), (1.0,), None, 1, 0, False)

HEUN = Tableau(
    "heun", (0.0, 1.0), ((), (1.0,)), (0.5, 0.5), (-0.5, 0.5), 2, 1, False
)

BOSH3 = Tableau(
    "bosh3",
    (0.0, 1 / 2, 3 / 4, 1.0),
    ((), (1 / 2,), (0.0, 3 / 4), (2 / 9, 1 / 3, 4 / 9)),
    (2 / 9, 1 / 3, 4 / 9, 0.0),
    (-5 / 72, 1 / 12, 1 / 9, -1 / 8),
    3,
    2,
    True,
)

DOPRI5 = Tableau(
    "dopri5",
    (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0),
    (
        (),
        (1 / 5,),
        (3 / 40, 9 / 40),
        (44 / 45, -56 / 15, 32 / 9),
        (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
        (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
        (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
    ),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0),
    (
        71 / 57600,
        0.0,
        -71 / 16695,
        71 / 1920,
        -17253 / 339200,
        22 / 525,
        -1 / 40,
    ),
    5,
    4,
    True,
)

TSIT5 = Tableau(
    "tsit5",
    (0.0, 0.161, 0.327, 0.9, 0.9800255409045097, 1.0, 1.0),
    (
        (),
        (0.161,),
        (-0.008480655492356989, 0.335480655492357),
        (2.897153057105493, -6.359448489975075, 4.3622954328695815),
        (5.325864828439257, -11.748883564062828, 7.4955393428898365,
         -0.09249506636175525),
        (5.86145544294642, -12.92096931784711, 8.159367898576159,
         -0.071584973281401, -0.028269050394068383),
        (0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
         -3.290069515436081, 2.324710524099774),
    ),
    (0.09646076681806523, 0.01, 0.4798896504144996, 1.379008574103742,
     -3.290069515436081, 2.324710524099774, 0.0),
    (-0.00178001105222577714, -0.0008164344596567469, 0.007880878010261995,
     -0.1447110071732629, 0.5823571654525552, -0.45808210592918697,
     0.015151515151515152),
    5,
    4,
    True,
)

_N853 = _dop853.N_STAGES
DOPRI8 = Tableau(
    "dopri8",
    tuple(float(c) for c in _dop853.C[:_N853]) + (1.0,),
    tuple(
        tuple(float(v) for v in _dop853.A[i, :i]) for i in range(_N853)
    )
    + (tuple(float(v) for v in _dop853.B),),
    tuple(float(v) for v in _dop853.B) + (0.0,),
    None,  # combined 5th/3rd order estimate, see _dop853_error
    8,
    7,
    True,
)
_E5 = jnp.asarray(_dop853.E5)
_E3 = jnp.asarray(_dop853.E3)

TABLEAUS = {t.name: t for t in (EULER, HEUN, BOSH3, TSIT5, DOPRI5, DOPRI8)}


@dataclass(frozen=True)
class SolverConfig:
    """How to integrate an ODE.

    ``fixed_dt`` switches to equal steps (``ceil(|t1 - t0| / fixed_dt)`` of
    them); otherwise the step is adapted to keep the embedded error below
    ``atol + rtol * |y|``.
    """

    method: str = "dopri5"
    rtol: float = 1e-5
    atol: float = 1e-5
    fixed_dt: float | None = None
    max_steps: int = 100_000
    safety: float = 0.9

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(TABLEAUS)}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigError("rtol and atol must be positive")
        if self.fixed_dt is not None and not self.fixed_dt > 0:
            raise ConfigError("fixed_dt must be positive")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.fixed_dt is None and TABLEAUS[self.method].err is None and self.method != "dopri8":
            raise ConfigError(f"{self.method} has no error estimate; set fixed_dt")

    @property
    def tableau(self) -> Tableau:
        return TABLEAUS[self.method]

    @property
    def adaptive(self) -> bool:
        return self.fixed_dt is None


@dataclass
class IntegrationResult:
    y_final: object
    nfe: int
    steps_accepted: int
    steps_rejected: int
    order: int = 1

    @property
    def nfe_lower_bound(self) -> int:
        """Accepted steps times method order (the cost proxy used in solver tables)."""
        return self.steps_accepted * self.order


def _combine(y, h, coeffs, ks):
    acc = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        term = c * k
        acc = term if acc is None else acc + term
    return y if acc is None else y + h * acc


def _dop853_error(h, ks):
    kmat = jnp.stack(ks)
    err5 = h * (_E5 @ kmat)
    err3 = h * (_E3 @ kmat)
    n5 = jnp.sum(err5**2)
    n3 = jnp.sum(err3**2)
    denom = n5 + 0.01 * n3
    gamma = jnp.where(denom > 0, jnp.sqrt(n5 / jnp.where(denom > 0, denom, 1.0)), 0.0)
    return err5 * gamma


def _rk_step(fn, tab: Tableau, y, t, h, k1=None):
    """One explicit RK step.  Returns ``(y1, err, k_new)``.

    ``k_new`` is the derivative at ``(t + h, y1)`` for FSAL methods and
    ``None`` otherwise.
    """
    ks = [fn(y, t) if k1 is None else k1]
    n_inner = tab.stages - 1 if tab.fsal else tab.stages
    for i in range(1, n_inner):
        yi = _combine(y, h, tab.a[i], ks)
        ks.append(fn(yi, t + tab.c[i] * h))
    y1 = _combine(y, h, tab.b, ks)
    k_new = None
    if tab.fsal:
        k_new = fn(y1, t + h)
        ks.append(k_new)
    if tab.name == "dopri8":
        err = _dop853_error(h, ks)
    elif tab.err is None:
        err = jnp.zeros_like(y)
    else:
        err = _combine(jnp.zeros_like(y), h, tab.err, ks)
    return y1, err, k_new


def step(method, field, y, t, dt, args=None):
    """Take one step of ``method`` (a name or :class:`Tableau`).

    Returns ``(y_next, err_estimate)``; the error estimate is the
    embedded-pair difference and is zero for Euler.
    """
    tab = TABLEAUS[method] if isinstance(method, str) else method
    if dt == 0:
        raise ConfigError("dt must be non-zero")
    fn = _bind(field, args)
    y = jnp.asarray(y, dtype=jnp.float64)
    y1, err, _ = _rk_step(fn, tab, y, t, dt)
    if not bool(jnp.all(jnp.isfinite(y1))):
        raise NumericalError(f"non-finite stage in {tab.name} step at t={t}")
    return y1, err


def _bind(field, args):
    if args is None:
        return lambda y, t: field(y, t)
    return lambda y, t: field(y, t, args)


def _rms(v):
    return jnp.sqrt(jnp.mean(v**2))


def n_fixed_steps(t0: float, t1: float, dt: float) -> int:
    return max(1, math.ceil(abs(t1 - t0) / dt - 1e-9))


def _solve_fixed(fn, y0, t0, t1, cfg: SolverConfig):
    tab = cfg.tableau
    n = n_fixed_steps(float(t0), float(t1), cfg.fixed_dt)
    h = (t1 - t0) / n
    nfe = n * tab.evals_per_step + (1 if tab.fsal else 0)

    def body(carry, i):
        y, k = carry
        t = t0 + i * h
        y1, _, k_new = _rk_step(fn, tab, y, t, h, k1=k)
        return (y1, k_new), None

    k0 = fn(y0, t0) if tab.fsal else None
    (y, _), _ = jax.lax.scan(body, (y0, k0), jnp.arange(n))
    status = jnp.where(jnp.all(jnp.isfinite(y)), STATUS_OK, STATUS_NONFINITE)
    stats = {
        "nfe": jnp.asarray(nfe),
        "accepted": jnp.asarray(n),
        "rejected": jnp.asarray(0),
        "t": jnp.asarray(t1, dtype=jnp.float64),
        "status": status,
    }
    return y, stats


def _initial_step(fn, y0, t0, t1, f0, order, rtol, atol):
    direction = jnp.sign(t1 - t0)
    span = jnp.abs(t1 - t0)
    scale = atol + rtol * jnp.abs(y0)
    d0 = _rms(y0 / scale)
    d1 = _rms(f0 / scale)
    h0 = jnp.where((d0 < 1e-5) | (d1 < 1e-5), 1e-6, 0.01 * d0 / jnp.maximum(d1, 1e-300))
    h0 = jnp.minimum(h0, span)
    f1 = fn(y0 + direction * h0 * f0, t0 + direction * h0)
    d2 = _rms((f1 - f0) / scale) / h0
    dmax = jnp.maximum(d1, d2)
    h1 = jnp.where(
        dmax <= 1e-15,
        jnp.maximum(1e-6, h0 * 1e-3),
        (0.01 / jnp.maximum(dmax, 1e-300)) ** (1.0 / (order + 1)),
    )
    return jnp.minimum(jnp.minimum(100 * h0, h1), span)


def _solve_adaptive(fn, y0, t0, t1, cfg: SolverConfig):
    tab = cfg.tableau
    t0 = jnp.asarray(t0, dtype=jnp.float64)
    t1 = jnp.asarray(t1, dtype=jnp.float64)
    direction = jnp.sign(t1 - t0)
    tiny = 1e-12 * jnp.maximum(1.0, jnp.abs(t1))
    expo = -1.0 / (tab.err_order + 1)
    f0 = fn(y0, t0)
    h = _initial_step(fn, y0, t0, t1, f0, tab.order, cfg.rtol, cfg.atol)
    per_attempt = tab.evals_per_step if tab.fsal else tab.stages
    zero = jnp.asarray(0)

    def cond(c):
        t, _, _, _, _, nacc, nrej, status = c
        return (status == STATUS_OK) & (direction * (t1 - t) > tiny) & (
            nacc + nrej < cfg.max_steps
        )

    def body(c):
        t, y, f, h, nfe, nacc, nrej, status = c
        remaining = jnp.abs(t1 - t)
        last = h >= remaining
        h_eff = direction * jnp.where(last, remaining, h)
        y1, err, k_new = _rk_step(fn, tab, y, t, h_eff, k1=f)
        if k_new is None:
            k_new = fn(y1, t + h_eff)
        scale = cfg.atol + cfg.rtol * jnp.maximum(jnp.abs(y), jnp.abs(y1))
        en = _rms(err / scale)
        finite = jnp.isfinite(en) & jnp.all(jnp.isfinite(y1))
        accept = finite & (en <= 1.0)
        factor = jnp.where(
            en > 0, cfg.safety * jnp.where(en > 0, en, 1.0) ** expo, 10.0
        )
        factor = jnp.clip(factor, 0.2, 10.0)
        factor = jnp.where(accept, factor, jnp.minimum(factor, 1.0))
        t_new = jnp.where(accept, jnp.where(last, t1, t + h_eff), t)
        y_new = jnp.where(accept, y1, y)
        f_new = jnp.where(accept, k_new, f)
        return (
            t_new,
            y_new,
            f_new,
            jnp.abs(h_eff) * factor,
            nfe + per_attempt,
            nacc + accept.astype(nacc.dtype),
            nrej + (~accept).astype(nrej.dtype),
            jnp.where(finite, status, STATUS_NONFINITE),
        )

    init = (t0, y0, f0, h, jnp.asarray(2), zero, zero, jnp.asarray(STATUS_OK))
    t, y, _, _, nfe, nacc, nrej, status = jax.lax.while_loop(cond, body, init)
    unfinished = direction * (t1 - t) > tiny
    status = jnp.where((status == STATUS_OK) & unfinished, STATUS_MAX_STEPS, status)
    stats = {"nfe": nfe, "accepted": nacc, "rejected": nrej, "t": t, "status": status}
    return y, stats


def solve(fn, y0, t0, t1, cfg: SolverConfig):
    """Traceable solve of ``dy/dt = fn(y, t)`` for a flat state vector.

    Returns ``(y1, stats)`` where ``stats`` holds ``nfe``, ``accepted``,
    ``rejected``, the time reached ``t`` and a ``status`` code.  In fixed
    step mode ``t0`` and ``t1`` must be concrete numbers.
    """
    if cfg.adaptive:
        return _solve_adaptive(fn, y0, t0, t1, cfg)
    return _solve_fixed(fn, y0, t0, t1, cfg)


def raise_for_status(stats, what="integration"):
    """Turn solver status codes (scalar or batched) into exceptions."""
    status = np.asarray(stats["status"])
    if np.any(status == STATUS_NONFINITE):
        t = np.asarray(stats["t"])[status == STATUS_NONFINITE] if status.ndim else stats["t"]
        raise NumericalError(f"{what}: non-finite state near t={np.ravel(t)[:4]}")
    if np.any(status == STATUS_MAX_STEPS):
        raise NoConvergenceError(
            f"{what}: max_steps exceeded", partial={k: np.asarray(v) for k, v in stats.items()}
        )


def integrate(field, y0, t0: float, t1: float, cfg: SolverConfig, args=None) -> IntegrationResult:
    """Solve ``dy/dt = field(y, t[, args])`` from ``t0`` to ``t1``.

    ``y0`` may be any pytree of arrays.  Raises
    :class:`~scoreprior.errors.NoConvergenceError` when ``max_steps`` is
    exhausted (with the partial state attached) and
    :class:`~scoreprior.errors.NumericalError` on non-finite states.
    """
    if t0 == t1:
        raise ConfigError("t0 and t1 must differ")
    flat, unravel = ravel_pytree(jax.tree_util.tree_map(lambda a: jnp.asarray(a, jnp.float64), y0))

    def fn(y, t):
        out = field(unravel(y), t) if args is None else field(unravel(y), t, args)
        return ravel_pytree(out)[0]

    y1, stats = _jit_solve(fn, cfg, float(t0), float(t1))(flat)
    status = int(stats["status"])
    if status == STATUS_MAX_STEPS:
        raise NoConvergenceError(
            f"max_steps={cfg.max_steps} exceeded at t={float(stats['t']):.6g}",
            partial={"t": float(stats["t"]), "y": unravel(y1), "nfe": int(stats["nfe"])},
        )
    if status == STATUS_NONFINITE:
        raise NumericalError(f"non-finite state near t={float(stats['t']):.6g}")
    return IntegrationResult(
        unravel(y1),
        int(stats["nfe"]),
        int(stats["accepted"]),
        int(stats["rejected"]),
        cfg.tableau.order,
    )


def _jit_solve(fn, cfg, t0, t1):
    return jax.jit(lambda y0: solve(fn, y0, t0, t1, cfg))
