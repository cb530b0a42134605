"""Linear forward models y = A x + noise and their Gaussian likelihoods.

Complex Fourier measurements are kept in real form: every selected
frequency contributes an interleaved (re, im) pair of rows.  Frequencies
that are their own Hermitian conjugate (DC and the Nyquist corners) have an
identically zero imaginary row; it is kept so the layout stays regular and
only contributes a constant to the likelihood.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from scoreprior.errors import ConfigError, ShapeError

CONVENTIONS = ("magnitude", "component")


@dataclass(frozen=True, eq=False)
class LinearForwardModel:
    """Measurement operator (real form), per-component noise std and data.

    Attributes:
        A: (M, D) real matrix.
        noise_sigma: std of each real measurement component.
        y: (M,) measurement vector, or None before simulation.
        kind: ``"denoise"``, ``"lowfreq"`` or ``"sparsefreq"``.
        meta: operator parameters, recorded in measurement files.
    """

    A: np.ndarray
    noise_sigma: float
    y: np.ndarray | None = None
    kind: str = "dense"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.A, dtype=np.float64)
        if a.ndim != 2:
            raise ShapeError("operator must be a matrix")
        object.__setattr__(self, "A", a)
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be positive")
        if self.y is not None:
            y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            if y.shape[0] != a.shape[0]:
                raise ShapeError(f"y has {y.shape[0]} entries, operator has {a.shape[0]} rows")
            object.__setattr__(self, "y", y)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_meas(self) -> int:
        return self.A.shape[0]

    def matrix(self) -> np.ndarray:
        return self.A

    def apply(self, x):
        """A x for a vector or a batch of rows."""
        return x @ self.A.T

    def adjoint(self, v):
        """A^H v in real form (A^T acting on interleaved pairs)."""
        return v @ self.A

    def with_measurement(self, y) -> LinearForwardModel:
        return replace(self, y=np.asarray(y, dtype=np.float64))

    def with_sigma(self, noise_sigma: float) -> LinearForwardModel:
        return replace(self, noise_sigma=float(noise_sigma))

    def active_rows(self) -> np.ndarray:
        """Indices of rows that are not identically zero."""
        return np.flatnonzero(np.any(self.A != 0.0, axis=1))


def _component_sigma(sigma_complex: float, convention: str) -> float:
    if convention not in CONVENTIONS:
        raise ConfigError(f"noise convention must be one of {CONVENTIONS}")
    if not sigma_complex > 0:
        raise ConfigError("sigma must be positive")
    return sigma_complex / math.sqrt(2.0) if convention == "magnitude" else sigma_complex


def denoise_model(dim: int, sigma: float = 0.2) -> LinearForwardModel:
    """Identity operator with i.i.d. Gaussian noise."""
    if not sigma > 0:
        raise ConfigError("sigma must be positive")
    return LinearForwardModel(np.eye(dim), float(sigma), kind="denoise", meta={"dim": dim, "sigma": sigma})


def wrapped(k: int, side: int) -> int:
    """Map an FFT index to the signed frequency in (-side/2, side/2]."""
    k %= side
    return k - side if k > side // 2 else k


def conjugate(freq, side):
    return ((-freq[0]) % side, (-freq[1]) % side)


def radial_order(side: int):
    """All frequencies sorted by squared radius, ties by row-major FFT index."""
    freqs = [(k, l) for k in range(side) for l in range(side)]
    return sorted(freqs, key=lambda f: (wrapped(f[0], side) ** 2 + wrapped(f[1], side) ** 2, f[0] * side + f[1]))


def lowfreq_indices(side: int, fraction: float):
    """The ceil(fraction * side^2) lowest frequencies, one per conjugate pair."""
    if side < 2:
        raise ConfigError("side must be at least 2")
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must lie in (0, 1]")
    n_sel = math.ceil(fraction * side * side - 1e-9)
    chosen, seen = [], set()
    for f in radial_order(side):
        if f in seen:
            continue
        chosen.append(f)
        seen.add(f)
        seen.add(conjugate(f, side))
        if len(chosen) == n_sel:
            break
    if not chosen:
        raise ConfigError("fraction selects no coefficients")
    return chosen


def all_frequencies(side: int):
    """One representative of every conjugate pair (a complete real basis)."""
    return lowfreq_indices(side, 1.0)


def dft_rows(side: int, freqs) -> np.ndarray:
    """Real-form rows of the unnormalised 2D DFT at the given frequencies."""
    m, n = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    rows = []
    for k, l in freqs:
        phase = 2.0 * np.pi * (k * m + l * n) / side
        rows.append(np.cos(phase).ravel())
        im = -np.sin(phase).ravel()
        if conjugate((k % side, l % side), side) == (k % side, l % side):
            im = np.zeros_like(im)  # exactly zero, not 1e-16 noise
        rows.append(im)
    return np.asarray(rows)


def lowfreq_dft_model(
    side: int, fraction: float = 0.0625, sigma_complex: float = 1.0, convention: str = "magnitude"
) -> LinearForwardModel:
    """Low-pass Fourier measurements of a side x side image."""
    freqs = lowfreq_indices(side, fraction)
    comp = _component_sigma(sigma_complex, convention)
    meta = {"side": side, "fraction": fraction, "sigma": sigma_complex, "convention": convention}
    return LinearForwardModel(dft_rows(side, freqs), comp, kind="lowfreq", meta=meta | {"freqs": freqs})


def sparsefreq_model(
    side: int, freq_list, sigma_complex: float = 1.0, convention: str = "magnitude"
) -> LinearForwardModel:
    """Fourier measurements at an arbitrary set of frequencies.

    Frequencies are (k, l) index pairs taken modulo ``side``; repeating a
    frequency or its Hermitian conjugate is rejected.
    """
    freqs = [(int(k) % side, int(l) % side) for k, l in freq_list]
    if not freqs:
        raise ConfigError("freq_list is empty")
    seen = set()
    for f in freqs:
        if f in seen:
            raise ConfigError(f"duplicate frequency {f} (or its conjugate)")
        seen.add(f)
        seen.add(conjugate(f, side))
    comp = _component_sigma(sigma_complex, convention)
    meta = {"side": side, "sigma": sigma_complex, "convention": convention, "freqs": freqs}
    return LinearForwardModel(dft_rows(side, freqs), comp, kind="sparsefreq", meta=meta)


def _need_y(model):
    if model.y is None:
        raise ConfigError("model has no measurement; call simulate_measurement first")
    return model.y


def log_likelihood(model: LinearForwardModel, x):
    """-||y - A x||^2 / (2 sigma^2), for a vector or batch of rows."""
    r = _need_y(model) - model.apply(np.asarray(x, dtype=np.float64))
    return -0.5 * np.sum(r**2, axis=-1) / model.noise_sigma**2


def grad_log_likelihood(model: LinearForwardModel, x):
    r = _need_y(model) - model.apply(np.asarray(x, dtype=np.float64))
    return model.adjoint(r) / model.noise_sigma**2


def simulate_measurement(model: LinearForwardModel, x_true, seed: int = 0) -> LinearForwardModel:
    """Return a copy of ``model`` holding y = A x_true + noise."""
    x_true = np.asarray(x_true, dtype=np.float64).reshape(-1)
    if x_true.shape[0] != model.dim:
        raise ShapeError(f"x_true has dim {x_true.shape[0]}, operator expects {model.dim}")
    rng = np.random.default_rng(seed)
    noise = model.noise_sigma * rng.standard_normal(model.n_meas)
    return model.with_measurement(model.apply(x_true) + noise)


def complex_coefficients(model: LinearForwardModel, v=None) -> np.ndarray:
    """View an interleaved real vector (default: y) as complex coefficients."""
    v = _need_y(model) if v is None else np.asarray(v)
    return v[0::2] + 1j * v[1::2]
