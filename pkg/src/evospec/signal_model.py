"""Synthetic evolutionary processes with known amplitude functions.

A process is described by a real, frequency-even amplitude ``A(f, t)``; its
evolutionary spectrum is ``S = A**2`` and its log-spectrum ``theta = ln S``.
Realizations discretize the spectral representation over ``n_freq_bins``
midpoint bins of width ``1/n_freq_bins`` with independent complex Gaussian
increments, conjugate-symmetric in frequency so that the output is real.

Presets carry a symbolic ``theta`` so that any mixed partial derivative is
available in closed form for test oracles.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
import sympy as sp

_F, _T = sp.symbols("f t", real=True)

__all__ = [
    "ProcessSpec",
    "TimeSeries",
    "simulate",
    "true_covariance",
    "make_preset",
    "PRESETS",
    "stationary_white",
    "am_modulated",
    "chirp",
    "varying_curvature",
]


@dataclass(frozen=True)
class TimeSeries:
    samples: np.ndarray
    sample_interval: float = 1.0
    seed: Optional[int] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("a time series needs at least one sample")
        object.__setattr__(self, "samples", x)

    @property
    def length(self) -> int:
        return self.samples.size

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class ProcessSpec:
    """Ground-truth description of an evolutionary process.

    Parameters
    ----------
    amplitude : callable
        Vectorized ``A(f, t)``; frequency in cycles/sample, time in samples.
        Must be real and even in ``f``.
    tau : float
        Characteristic time scale (samples).
    lambda_f : float
        Characteristic frequency scalelength (cycles/sample).
    smoothness_order : int
        Number of continuous derivatives declared for ``theta``.
    theta_expr : sympy expression, optional
        Symbolic ``ln S(f, t)`` in the symbols ``f`` and ``t``; enables exact
        derivatives through :meth:`theta_derivative`.
    """

    amplitude: Callable
    tau: float
    lambda_f: float
    smoothness_order: int = 2
    name: str = "custom"
    params: Mapping = field(default_factory=dict)
    theta_expr: Optional[sp.Expr] = field(default=None, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not (self.tau > 0 and self.lambda_f > 0):
            raise ValueError("tau and lambda_f must be positive")
        if self.smoothness_order < 2:
            raise ValueError("smoothness_order must be at least 2")

    def amp(self, f, t):
        f = np.asarray(f, dtype=float)
        t = np.asarray(t, dtype=float)
        shape = np.broadcast_shapes(f.shape, t.shape)
        return np.broadcast_to(np.asarray(self.amplitude(f, t), dtype=float), shape)

    def spectrum(self, f, t):
        return self.amp(f, t) ** 2

    def theta(self, f, t):
        if self.theta_expr is None:
            with np.errstate(divide="ignore"):
                return np.log(self.spectrum(f, t))
        return self.theta_derivative(0, 0, normalized=False)(f, t)

    def theta_derivative(self, nf: int, nt: int, normalized: bool = True):
        """Return a vectorized ``d^nf/df^nf d^nt/dt^nt theta``.

        With ``normalized=True`` derivatives are taken in the slow variables
        ``f/lambda_f`` and ``t/tau``.
        """
        if self.theta_expr is None:
            raise ValueError(f"preset {self.name!r} has no symbolic log-spectrum")
        key = (nf, nt)
        if key not in self._cache:
            expr = sp.diff(self.theta_expr, _F, nf, _T, nt) if (nf or nt) else self.theta_expr
            self._cache[key] = sp.lambdify((_F, _T), expr, modules="numpy")
        fn = self._cache[key]
        scale = self.lambda_f**nf * self.tau**nt if normalized else 1.0

        def evaluate(f, t):
            f = np.asarray(f, dtype=float)
            t = np.asarray(t, dtype=float)
            shape = np.broadcast_shapes(f.shape, t.shape)
            return scale * np.broadcast_to(np.asarray(fn(f, t), dtype=float), shape)

        return evaluate


def _from_theta(expr, **kwargs) -> ProcessSpec:
    amp_fn = sp.lambdify((_F, _T), sp.exp(expr / 2), modules="numpy")
    return ProcessSpec(amplitude=amp_fn, theta_expr=expr, **kwargs)


def stationary_white(level: float = 1.0) -> ProcessSpec:
    """Flat spectrum ``S = level**2``; ``theta = 2 ln(level)``."""
    if level <= 0:
        return ProcessSpec(lambda f, t: 0.0 * f * t, tau=1e6, lambda_f=0.5,
                           name="stationary-white", params={"level": level})
    expr = sp.Float(2 * np.log(level)) + 0 * _F
    return _from_theta(expr, tau=1e6, lambda_f=0.5, smoothness_order=8,
                       name="stationary-white", params={"level": level})


def am_modulated(g_amplitude: float = 0.5, period: float = 1000.0) -> ProcessSpec:
    """White noise with envelope ``g(t) = 1 + a cos(2 pi t / period)``.

    ``theta = 2 ln g(t)``, flat in frequency; ``tau = period / (2 pi)``.
    """
    if not abs(g_amplitude) < 1:
        raise ValueError("g_amplitude must satisfy |a| < 1 to keep S positive")
    g = 1 + sp.Float(g_amplitude) * sp.cos(2 * sp.pi * _T / sp.Float(period))
    return _from_theta(2 * sp.log(g) + 0 * _F, tau=period / (2 * np.pi), lambda_f=0.5,
                       smoothness_order=8, name="am",
                       params={"g_amplitude": g_amplitude, "period": period})


def chirp(tau: float = 1000.0, lambda_f: float = 0.05, amplitude: float = 2.0,
          center: float = 0.25, drift: float = 1.0, base: float = 0.0) -> ProcessSpec:
    """Log-Gaussian spectral bump whose centre drifts sinusoidally.

    ``theta = base + amplitude * [G(f - c(t)) + G(f + c(t))]`` with
    ``G(x) = exp(-x**2 / (2 lambda_f**2))`` and
    ``c(t) = center + drift * lambda_f * sin(t / tau)``. In the slow
    variables every derivative is of order ``amplitude``.
    """
    lam = sp.Float(lambda_f)
    c = sp.Float(center) + sp.Float(drift) * lam * sp.sin(_T / sp.Float(tau))
    bump = sp.exp(-((_F - c) ** 2) / (2 * lam**2)) + sp.exp(-((_F + c) ** 2) / (2 * lam**2))
    expr = sp.Float(base) + sp.Float(amplitude) * bump
    return _from_theta(expr, tau=tau, lambda_f=lambda_f, smoothness_order=8, name="chirp",
                       params=dict(tau=tau, lambda_f=lambda_f, amplitude=amplitude,
                                   center=center, drift=drift, base=base))


def varying_curvature(tau: float = 1000.0, lambda_f: float = 0.05, amplitude: float = 2.0,
                      center_f: float = 0.2, center_t: float = 2000.0) -> ProcessSpec:
    """Isolated log-Gaussian bump in time and frequency on a flat background.

    Curvature is concentrated near ``(center_f, center_t)`` and vanishes
    elsewhere, so the optimal halfwidths vary strongly across the plane.
    """
    lam, tu = sp.Float(lambda_f), sp.Float(tau)
    g_t = sp.exp(-((_T - sp.Float(center_t)) ** 2) / (2 * tu**2))
    g_f = (sp.exp(-((_F - sp.Float(center_f)) ** 2) / (2 * lam**2))
           + sp.exp(-((_F + sp.Float(center_f)) ** 2) / (2 * lam**2)))
    expr = sp.Float(amplitude) * g_t * g_f
    return _from_theta(expr, tau=tau, lambda_f=lambda_f, smoothness_order=8,
                       name="varying-curvature",
                       params=dict(tau=tau, lambda_f=lambda_f, amplitude=amplitude,
                                   center_f=center_f, center_t=center_t))


PRESETS = {
    "stationary-white": stationary_white,
    "am": am_modulated,
    "chirp": chirp,
    "varying-curvature": varying_curvature,
}


def make_preset(name: str, **params) -> ProcessSpec:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**params)


# ---------------------------------------------------------------------------
# simulation


def _check_bins(n_freq_bins):
    if n_freq_bins < 2 or n_freq_bins % 2:
        raise ValueError("n_freq_bins must be even and at least 2 (conjugate symmetry)")


def _positive_freqs(n):
    return (np.arange(n // 2) + 0.5) / n


def _phase(t, n):
    """``exp(i pi t / n)`` for integer ``t``, reduced exactly modulo ``2n``."""
    return np.exp(1j * np.pi * (np.mod(t, 2 * n) / n))


def _check_even(spec, freqs, n_samples):
    times = np.unique(np.linspace(0, n_samples - 1, 9).round())
    a_pos = spec.amp(freqs[None, :], times[:, None])
    a_neg = spec.amp(-freqs[None, :], times[:, None])
    scale = max(np.max(np.abs(a_pos)), 1e-300)
    if np.max(np.abs(a_pos - a_neg)) > 1e-12 * scale:
        raise ValueError("amplitude must be even in frequency for a real process")


def _dense_sum(spec, t, freqs, dz, n, sign=1):
    """Direct evaluation of ``sum_j A(s f_j, t) dz_j exp(2 pi i s f_j t)``."""
    j2 = 2 * np.arange(freqs.size) + 1
    table = np.exp(1j * np.pi * np.arange(2 * n) / n)
    out = np.empty(t.size, dtype=complex)
    step = max(1, 2**21 // max(freqs.size, 1))
    for lo in range(0, t.size, step):
        tt = t[lo:lo + step]
        idx = np.mod(np.outer(tt, j2), 2 * n)
        amp = spec.amp(sign * freqs[None, :], tt[:, None].astype(float))
        e = table[idx] if sign > 0 else np.conj(table[idx])
        w = dz if sign > 0 else np.conj(dz)
        out[lo:lo + step] = (amp * e) @ w
    return out


def _cheb_block(spec, freqs, lo, hi, degree):
    """Chebyshev coefficients in time of ``A(f_j, t)`` over ``[lo, hi]``."""
    k = np.arange(degree + 1)
    u = np.cos(np.pi * (k + 0.5) / (degree + 1))
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = mid + half * u
    vals = spec.amp(freqs[None, :], nodes[:, None])
    tm = np.cos(np.outer(k, np.arccos(u)))
    coef = (2.0 / (degree + 1)) * tm @ vals
    coef[0] *= 0.5
    return coef, mid, half


def _cheb_eval(coef, u):
    tm = np.cos(np.outer(np.arange(coef.shape[0]), np.arccos(np.clip(u, -1, 1))))
    return tm.T @ coef


def _chebyshev_sum(spec, n_samples, freqs, dz, n, degree=16, tol=1e-11):
    out = np.empty(n_samples, dtype=complex)
    t_all = np.arange(n_samples)
    phase = _phase(t_all, n)
    blocks = [(0, n_samples - 1)]
    while blocks:
        lo, hi = blocks.pop()
        coef, mid, half = _cheb_block(spec, freqs, lo, hi, degree)
        # accuracy probe at points that are not Chebyshev nodes
        probe = np.unique(np.clip(np.round(np.linspace(lo, hi, 7)), lo, hi))
        u = (probe - mid) / half if half > 0 else np.zeros_like(probe)
        approx = _cheb_eval(coef, u)
        exact = spec.amp(freqs[None, :], probe[:, None])
        scale = max(np.max(np.abs(exact)), 1e-300)
        if hi - lo > 8 and np.max(np.abs(approx - exact)) > tol * scale:
            cut = (lo + hi) // 2
            blocks.extend([(lo, cut), (cut + 1, hi)])
            continue
        t = t_all[lo:hi + 1]
        u = (t - mid) / half if half > 0 else np.zeros(t.size)
        tm = np.cos(np.outer(np.arange(degree + 1), np.arccos(np.clip(u, -1, 1))))
        resid = np.mod(t, n)
        acc = np.zeros(t.size, dtype=complex)
        for m in range(degree + 1):
            g = np.zeros(n, dtype=complex)
            g[:freqs.size] = coef[m] * dz
            s_m = np.fft.ifft(g) * n
            acc += tm[m] * s_m[resid]
        out[lo:hi + 1] = acc * phase[lo:hi + 1]
    return out


def simulate(spec: ProcessSpec, n_samples: int, n_freq_bins: Optional[int] = None,
             rng_seed: int = 0, method: str = "auto") -> TimeSeries:
    """Draw one realization of ``spec``.

    Parameters
    ----------
    n_samples : int
        Output length.
    n_freq_bins : int, optional
        Even number of frequency bins; defaults to the smallest even number
        not below ``n_samples`` (fewer bins make the output periodic).
    rng_seed : int
        Seed for :func:`numpy.random.default_rng`.
    method : {"auto", "dense", "chebyshev"}
        ``dense`` sums every (time, frequency) term directly. ``chebyshev``
        interpolates ``A`` in time blockwise (relative error < 1e-11) and
        sums over frequency with FFTs; ``auto`` picks by problem size.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if n_freq_bins is None:
        n_freq_bins = n_samples + (n_samples % 2)
    _check_bins(n_freq_bins)
    n = n_freq_bins
    freqs = _positive_freqs(n)
    _check_even(spec, freqs, n_samples)

    rng = np.random.default_rng(rng_seed)
    dz = (rng.standard_normal(freqs.size) + 1j * rng.standard_normal(freqs.size))
    dz *= np.sqrt(0.5 / n)

    if method == "auto":
        method = "dense" if n_samples * freqs.size <= 4_000_000 else "chebyshev"
    t = np.arange(n_samples)
    if method == "dense":
        pos = _dense_sum(spec, t, freqs, dz, n)
    elif method == "chebyshev":
        pos = _chebyshev_sum(spec, n_samples, freqs, dz, n)
    else:
        raise ValueError(f"unknown method {method!r}")

    # full symmetric sum on a short prefix, to record the imaginary residue
    head = t[: min(n_samples, 64)]
    full = _dense_sum(spec, head, freqs, dz, n) + _dense_sum(spec, head, freqs, dz, n, sign=-1)
    residue = float(np.max(np.abs(full.imag))) if head.size else 0.0
    x = 2.0 * pos.real
    return TimeSeries(x, 1.0, rng_seed, meta={"n_freq_bins": n, "method": method,
                                              "imag_residue": residue, "preset": spec.name})


def true_covariance(spec: ProcessSpec, t: int, s: int, n_freq_bins: int) -> float:
    """``Cov[x_t, x_s]`` of the discretized process (midpoint quadrature)."""
    if n_freq_bins < 2:
        raise ValueError("n_freq_bins must be >= 2")
    n = n_freq_bins + (n_freq_bins % 2)
    freqs = _positive_freqs(n)
    a_t = spec.amp(freqs, float(t))
    a_s = spec.amp(freqs, float(s))
    return float(2.0 * np.sum(a_t * a_s * np.cos(2 * np.pi * (t - s) * freqs)) / n)


def block_variance(x: np.ndarray, block: int) -> np.ndarray:
    """Mean of ``x**2`` over consecutive blocks (zero-mean process)."""
    nb = x.size // block
    if nb == 0:
        warnings.warn("block longer than series", stacklevel=2)
        return np.array([])
    return np.mean(x[: nb * block].reshape(nb, block) ** 2, axis=1)
