"""Expected loss of a crossproduct smoother and its leading-order minimizer.

Halfwidths are written as ``h_f = h * r`` and ``h_t = h / r`` so that
``h = sqrt(h_t h_f)`` and ``r = sqrt(h_f / h_t)``. Derivatives are in slow
units (``t/tau``, ``f/lambda_f``) and the derivative order ``q`` sits on the
time axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError

__all__ = [
    "DerivativeBundle",
    "LossSolution",
    "expected_loss",
    "aspect_ratio_power",
    "optimal_aspect_ratio",
    "optimal_halfwidth",
    "optimal_halfwidth_field",
    "R_LIMITS",
]

# Aspect ratios outside this range only arise when one derivative vanishes.
R_LIMITS = (1e-3, 1e3)


@dataclass(frozen=True)
class DerivativeBundle:
    """Plug-in derivatives of the log spectrum in slow units."""

    dtp: float
    dfp: float
    dtp2: Optional[float] = None
    dfp2: Optional[float] = None
    mixed: Optional[float] = None
    units: str = "normalized"

    def __post_init__(self):
        for name in ("dtp", "dfp", "dtp2", "dfp2", "mixed"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise ValueError(f"derivative {name} is not finite")


@dataclass(frozen=True)
class LossSolution:
    r: float
    h: float
    h_t: float
    h_f: float
    loss: float
    regularized: bool
    K_value: float
    clamped: bool = False


def _constants(moments):
    """``(C(0,p), C(q,p), C2(0,p), C2(q,p))`` from a moment pair or floats."""
    m0, mq = moments
    get = lambda m, a: getattr(m, a) if hasattr(m, a) else (float(m) if a == "c_qp" else 0.0)
    return get(m0, "c_qp"), get(mq, "c_qp"), get(m0, "c2_qp"), get(mq, "c2_qp")


def expected_loss(derivs: DerivativeBundle, q: int, p: int, moments, rho: float,
                  h_t, h_f, extended: bool = False):
    """Squared bias plus variance of a ``(q,p) x (0,p)`` estimate.

    ``moments`` is ``(freq_moments, time_moments)``: the ``(0,p)`` frequency
    kernel and the ``(q,p)`` time kernel (``KernelMoments`` or bare ``C``
    values). With ``extended`` the ``p+2`` and mixed bias terms are added.
    """
    h_t = np.asarray(h_t, dtype=float)
    h_f = np.asarray(h_f, dtype=float)
    if np.any(h_t <= 0) or np.any(h_f <= 0):
        raise ConfigError("halfwidths must be positive")
    c0, cq, c20, c2q = _constants(moments)
    bias = c0 * derivs.dfp * h_f**p * h_t ** (-q) + cq * derivs.dtp * h_t ** (p - q)
    if extended:
        bias = (bias
                + c20 * (derivs.dfp2 or 0.0) * h_f ** (p + 2) * h_t ** (-q)
                + c2q * (derivs.dtp2 or 0.0) * h_t ** (p + 2 - q)
                + c0 * cq * (derivs.mixed or 0.0) * h_f**p * h_t ** (p - q))
    out = bias**2 + rho / (h_f * h_t ** (2 * q + 1))
    return float(out) if out.ndim == 0 else out


def aspect_ratio_power(a, c, q: int, p: int, reg_b: float = 0.1):
    """Minimizing ``x = r**(2p)`` for frequency bias ``a`` and time bias ``c``.

    ``a = C(0,p) dfp`` and ``c = C(q,p) dtp``. When ``a c > 0`` this is the
    interior stationary point ``x = (p-q) c / ((2pq+p+q) a)``; otherwise the
    positive root of ``(2pq+p+q) a^2 x^2 + 2q(p+1) b a c x - (p-q) c^2 = 0``.
    Returns ``(x, regularized)`` arrays.
    """
    a = np.asarray(a, dtype=float)
    c = np.asarray(c, dtype=float)
    k1 = 2 * p * q + p + q
    pos = a * c > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x_pos = (p - q) * c / (k1 * a)
        qa = k1 * a * a
        qb = 2 * q * (p + 1) * reg_b * a * c
        qc = (p - q) * c * c
        disc = np.sqrt(qb * qb + 4 * qa * qc)
        # stable form of (-qb + disc) / (2 qa)
        x_reg = np.where(qb <= 0, (disc - qb) / (2 * qa), 2 * qc / (disc + qb))
    x = np.where(pos, x_pos, x_reg)
    both_zero = (a == 0) & (c == 0)
    x = np.where(both_zero, 1.0, x)
    lo, hi = R_LIMITS[0] ** (2 * p), R_LIMITS[1] ** (2 * p)
    x = np.where(np.isnan(x), 1.0, x)
    x = np.clip(x, lo, hi)
    return x, ~pos


def optimal_aspect_ratio(derivs: DerivativeBundle, q: int, p: int, moments,
                         reg_b: float = 0.1):
    """Leading-order optimal ``r = sqrt(h_f / h_t)`` and a regularization flag."""
    if not p > q:
        raise ConfigError(f"need p > q, got q={q}, p={p}")
    c0, cq, _, _ = _constants(moments)
    x, reg = aspect_ratio_power(c0 * derivs.dfp, cq * derivs.dtp, q, p, reg_b)
    return float(x ** (1.0 / (2 * p))), bool(reg)


def _k_values(a, c, r, p, reg_b, pathological):
    """``K(r)`` and its regularized form ``K_b(r)``.

    Where the two bias terms have opposite signs the cross term is damped by
    ``reg_b``: ``a^2 r^2p + 2 b a c + c^2 r^-2p``, the loss averaged over a
    small neighbourhood. That form never falls below
    ``(1 - b)(a^2 r^2p + c^2 r^-2p)`` but vanishes at ``b = 1``, so it is
    also floored at ``b (a^2 + c^2)``. Elsewhere ``K_b = K``.
    """
    k = (a * r**p + c * r ** (-p)) ** 2
    damped = a * a * r ** (2 * p) + 2 * reg_b * a * c + c * c * r ** (-2 * p)
    floor = reg_b * (a * a + c * c)
    return k, np.where(pathological, np.maximum(np.maximum(k, damped), floor), k)


def optimal_halfwidth_field(dtp, dfp, q: int, p: int, moments, rho, reg_b: float = 0.1,
                            bounds=None):
    """Vectorized leading-order optimum over arrays of plug-in derivatives.

    ``bounds`` is ``((h_t_min, h_t_max), (h_f_min, h_f_max))``. Returns a dict
    of arrays: ``r, h, h_t, h_f, K, regularized, clamped``.
    """
    if not 0 < reg_b <= 1:
        raise ConfigError(f"reg_b must lie in (0, 1], got {reg_b}")
    rho = np.asarray(rho, dtype=float)
    if np.any(rho <= 0):
        raise ConfigError("rho must be positive")
    c0, cq, _, _ = _constants(moments)
    a = c0 * np.asarray(dfp, dtype=float)
    c = cq * np.asarray(dtp, dtype=float)
    x, reg = aspect_ratio_power(a, c, q, p, reg_b)
    r = x ** (1.0 / (2 * p))
    _, kb = _k_values(a, c, r, p, reg_b, reg)
    with np.errstate(divide="ignore"):
        h = ((q + 1) / (p - q) * rho / kb) ** (1.0 / (2 * p + 2))
    h_t, h_f = h / r, h * r
    clamped = np.zeros(np.shape(h), dtype=bool)
    if bounds is not None:
        (t_lo, t_hi), (f_lo, f_hi) = bounds
        ct, cf = np.clip(h_t, t_lo, t_hi), np.clip(h_f, f_lo, f_hi)
        clamped = (ct != h_t) | (cf != h_f)
        h_t, h_f = ct, cf
        h, r = np.sqrt(h_t * h_f), np.sqrt(h_f / h_t)
    return dict(r=r, h=h, h_t=h_t, h_f=h_f, K=kb, regularized=reg, clamped=clamped)


def optimal_halfwidth(derivs: DerivativeBundle, q: int, p: int, moments, rho: float,
                      reg_b: float = 0.1, bounds=None) -> LossSolution:
    """Optimal ``h_o`` with ``h_o**(2p+2) = (q+1)/(p-q) * rho / K_b(r)``.

    ``K(r) = (C(0,p) dfp r^p + C(q,p) dtp r^-p)^2``. When the two terms have
    opposite signs ``K`` vanishes at some ``r``; there the cross term is
    damped by ``reg_b`` (see :func:`aspect_ratio_power`) and the result is
    flagged as regularized.
    """
    if not p > q:
        raise ConfigError(f"need p > q, got q={q}, p={p}")
    if rho <= 0:
        raise ConfigError(f"rho must be positive, got {rho}")
    out = optimal_halfwidth_field(derivs.dtp, derivs.dfp, q, p, moments, rho, reg_b, bounds)
    h_t, h_f = float(out["h_t"]), float(out["h_f"])
    if math.isfinite(h_t) and math.isfinite(h_f):
        loss = expected_loss(derivs, q, p, moments, rho, h_t, h_f)
    else:
        loss = float("nan")
    return LossSolution(float(out["r"]), float(out["h"]), h_t, h_f, loss,
                        bool(out["regularized"]), float(out["K"]), bool(out["clamped"]))
