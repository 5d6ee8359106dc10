"""Two-channel coherence and phase on a shared time-frequency lattice.

Cross and auto spectra come from the same tapered windowed transform used
for single-channel estimates. The coherence magnitude is stabilized with
``Q = sqrt(4K - 2) arctanh |C|`` before smoothing; the phase is smoothed as a
unit-modulus complex factor and renormalized afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DataError
from .kernels import (SmootherSpec, canonical_kernel, kernel_moments, smooth, smoother_for,
                      smoother_variance)
from .loss_optimizer import DerivativeBundle, optimal_halfwidth
from .signal_model import TimeSeries
from .taper_lattice import CovarianceModel, LogSpectralField, Taper, windowed_transform

__all__ = ["CrossField", "cross_point_estimates", "stabilize", "smooth_coherence",
           "coherence_smoother", "CLIP_EPS", "PHASE_EPS"]

CLIP_EPS = 1e-8
# smoothed unit factors below this modulus have no usable phase
PHASE_EPS = 1e-12


@dataclass
class CrossField:
    s11: np.ndarray
    s22: np.ndarray
    s12: np.ndarray
    coherence_mag: np.ndarray
    gamma: np.ndarray
    k_tapers: int = 1
    q_field: Optional[np.ndarray] = None
    q_bias: float = 0.0
    phase_defined: Optional[np.ndarray] = None
    coherence_band: Optional[tuple] = None
    dt: float = 1.0
    df: float = 1.0
    freqs: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    smoothed: bool = False

    @property
    def shape(self):
        return self.s11.shape

    @property
    def q_scale(self) -> float:
        return math.sqrt(4 * self.k_tapers - 2)

    def phase(self) -> np.ndarray:
        """Phase in cycles, ``angle(gamma) / 2 pi``."""
        return np.angle(self.gamma) / (2 * np.pi)

    def _as_field(self, values) -> LogSpectralField:
        return LogSpectralField(values, self.dt, self.df, freqs=self.freqs, times=self.times)


def _unit(z, tol=0.0):
    mag = np.abs(z)
    ok = mag > tol
    out = np.ones_like(z, dtype=complex)
    out[ok] = z[ok] / mag[ok]
    return out, ok


def cross_point_estimates(x1: TimeSeries, x2: TimeSeries, taper: Taper,
                          overlap=(0.5, 0.5)) -> CrossField:
    """Single-taper auto and cross spectra with the coherence magnitude.

    ``|C|`` is clipped to ``1 - CLIP_EPS`` so the arctanh transform stays
    finite; with one taper every cell has ``|C| = 1`` before clipping.
    """
    a = np.asarray(getattr(x1, "samples", x1), dtype=float)
    b = np.asarray(getattr(x2, "samples", x2), dtype=float)
    if a.shape != b.shape:
        raise DataError(f"channel lengths differ: {a.size} vs {b.size}")
    p_t, p_f = overlap
    y1 = windowed_transform(a, taper, p_t, p_f)
    y2 = windowed_transform(b, taper, p_t, p_f)
    s11 = np.abs(y1.values) ** 2
    s22 = np.abs(y2.values) ** 2
    s12 = y1.values * np.conj(y2.values)
    denom = np.sqrt(s11 * s22)
    with np.errstate(invalid="ignore", divide="ignore"):
        mag = np.where(denom > 0, np.abs(s12) / denom, 0.0)
    mag = np.clip(mag, 0.0, 1.0 - CLIP_EPS)
    gamma, ok = _unit(s12)
    return CrossField(s11, s22, s12, mag, gamma, 1, phase_defined=ok, dt=y1.dt, df=y1.df,
                      freqs=y1.freqs, times=y1.times)


def stabilize(cf: CrossField) -> CrossField:
    """Apply ``Q = sqrt(4K - 2) arctanh |C|`` and record the bias ``1/sqrt(4K - 2)``."""
    q = cf.q_scale * np.arctanh(np.clip(cf.coherence_mag, 0.0, 1.0 - CLIP_EPS))
    return replace(cf, q_field=q, q_bias=1.0 / cf.q_scale)


def coherence_smoother(cf: CrossField, tau: float, lambda_f: float, p: int = 2,
                       q_scale_prior: float = 1.0, reg_b: float = 0.1) -> SmootherSpec:
    """Global ``(0,p)`` smoother for ``Q`` from the scalelength ansatz.

    ``Q`` has unit variance, so the loss constant uses a unit diagonal
    covariance.
    """
    k0 = kernel_moments(canonical_kernel(0, p, 4.0))
    rho = k0.roughness**2 * cf.dt * cf.df / (tau * lambda_f)
    sol = optimal_halfwidth(DerivativeBundle(q_scale_prior, q_scale_prior), 0, p, (k0, k0),
                            rho, reg_b)
    nf, nt = cf.shape
    h_t = min(sol.h_t, (nt - 1) / 4.0 * cf.dt / tau)
    h_f = min(sol.h_f, (nf - 1) / 4.0 * cf.df / lambda_f)
    return smoother_for(h_t, h_f, cf.dt, cf.df, tau, lambda_f, p=p)


def smooth_coherence(cf: CrossField, spec: SmootherSpec) -> CrossField:
    """Smooth ``Q`` and the phase factor, then map back to coherence.

    The ``Q`` bias is subtracted before smoothing. Coherence and its two
    standard-error band are ``tanh(max(Q, 0) / sqrt(4K - 2))``, so they stay
    inside ``[0, 1)``. Cells where the smoothed phase factor vanishes are
    marked undefined and keep ``gamma = 1``.
    """
    if cf.q_field is None:
        cf = stabilize(cf)
    q_s = smooth(cf._as_field(cf.q_field - cf.q_bias), spec, reflect_f0=False).theta
    unit = CovarianceModel("diagonal", np.array([[1.0]]), 1.0)
    sd = math.sqrt(smoother_variance(spec, unit)[0])
    back = lambda q: np.tanh(np.maximum(q, 0.0) / cf.q_scale)
    re = smooth(cf._as_field(cf.gamma.real), spec, reflect_f0=False).theta
    im = smooth(cf._as_field(cf.gamma.imag), spec, reflect_f0=False).theta
    gamma, ok = _unit(re + 1j * im, PHASE_EPS)
    return replace(cf, q_field=q_s, coherence_mag=back(q_s), gamma=gamma, phase_defined=ok,
                   coherence_band=(back(q_s - 2 * sd), back(q_s + 2 * sd)), smoothed=True)
