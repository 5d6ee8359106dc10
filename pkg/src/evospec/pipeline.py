"""Multi-stage plug-in estimation of the log evolutionary spectrum.

Stages: choose a taper, form the lattice of log point estimates, estimate
the order-``p`` derivatives with pilot kernels, solve for local optimal
halfwidths from the plug-in derivatives, then smooth with ``(0,p)`` kernels
whose width varies cell by cell.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.special import digamma

from .errors import ConfigError, DataError, EvoSpecError, StageError
from .kernels import (SmootherSpec, _reflect_flags, axis_matrix, canonical_kernel,
                      kernel_moments, smooth, smooth_derivative, smooth_variable, smoother_for,
                      smoother_variance)
from .loss_optimizer import (DerivativeBundle, expected_loss, optimal_halfwidth,
                             optimal_halfwidth_field)
from .signal_model import ProcessSpec, TimeSeries
from .taper_lattice import (EULER_GAMMA, PSI1, CovarianceModel, LogSpectralField,
                            covariance_model, log_point_estimate, make_taper,
                            optimal_taper_params, point_bias_surrogate, windowed_transform)

log = logging.getLogger(__name__)

__all__ = [
    "PipelineConfig",
    "HalfwidthField",
    "EstimateReport",
    "bias_correct",
    "scalelength_init",
    "rice_criterion",
    "operator_self_influence",
    "rice_grid",
    "rice_select",
    "factor_method",
    "smooth_global",
    "run_pipeline",
    "true_log_spectrum",
    "ContinuityWarning",
]

# E[ln X] for X ~ chi^2_1 / 1, used on real-valued rows (f = 0, f = 1/2).
REAL_ROW_OFFSET = -(digamma(0.5) + math.log(2.0))
REFERENCE_H = 4.0


class ContinuityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Settings for :func:`run_pipeline`.

    ``h_min`` is the smallest index halfwidth (in lattice spacings) any
    smoother may use. ``rice_grid`` holds explicit ``(H_t, H_f)`` index
    halfwidth pairs; ``None`` builds the default 12 x 12 logarithmic grid.
    """

    final_order: int = 2
    stages: str = "two_stage"
    init: str = "scalelength"
    tau_prior: float = 1000.0
    lambda_f_prior: float = 0.05
    theta_scale_prior: float = 1.0
    smoothness_order: int = 4
    reg_b: float = 0.1
    overlap: tuple = (0.5, 0.5)
    rice_grid: Optional[tuple] = None
    h_min: float = 1.0
    taper_family: str = "uniform"
    covariance: str = "auto"
    kernel_shape: str = "minimal_norm"
    continuity_factor: float = 5.0
    local: bool = True
    halfwidth_smoothing: bool = True

    def __post_init__(self):
        if self.stages not in ("two_stage", "three_stage"):
            raise ConfigError(f"stages must be two_stage or three_stage, got {self.stages!r}")
        if self.init not in ("scalelength", "rice_factor", "parametric"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.final_order < 2 or self.final_order % 2:
            # symmetric (0,p) kernels of odd order have C(0,p) = 0: no leading bias
            raise ConfigError(f"final_order must be even and at least 2, got {self.final_order}")
        if self.final_order > self.smoothness_order:
            raise ConfigError(f"final_order {self.final_order} exceeds the declared "
                              f"smoothness order {self.smoothness_order}")
        if min(self.tau_prior, self.lambda_f_prior, self.theta_scale_prior) <= 0:
            raise ConfigError("priors must be positive")
        if not 0 < self.reg_b <= 1:
            raise ConfigError("reg_b must lie in (0, 1]")
        if self.h_min <= 0:
            raise ConfigError("h_min must be positive")
        if self.covariance not in ("auto", "diagonal", "windowed"):
            raise ConfigError(f"unknown covariance mode {self.covariance!r}")
        if self.rice_grid is not None and min(min(g) for g in self.rice_grid) < self.h_min:
            raise ConfigError("rice_grid halfwidths must be >= h_min")
        pt, pf = self.overlap
        if not (pt > 0 and pf > 0):
            raise ConfigError("overlap factors must be positive")

    @property
    def effective_stages(self) -> str:
        return "three_stage" if self.init == "rice_factor" else self.stages


@dataclass
class HalfwidthField:
    """Local normalized halfwidths and the kernel index bounds used."""

    h_t: np.ndarray
    h_f: np.ndarray
    m_t: np.ndarray
    m_f: np.ndarray
    regularized: np.ndarray
    clamped: np.ndarray


@dataclass
class EstimateReport:
    theta_hat: LogSpectralField
    s_hat: np.ndarray
    derivatives: dict
    halfwidths: HalfwidthField
    expected_loss_field: np.ndarray
    confidence_halfwidth: np.ndarray
    raw: LogSpectralField
    config: PipelineConfig
    diagnostics: dict = field(default_factory=dict)

    @property
    def band(self):
        """Back-transformed ``(lower, upper)`` spectrum band."""
        lo = np.exp(self.theta_hat.theta - self.confidence_halfwidth)
        hi = np.exp(self.theta_hat.theta + self.confidence_halfwidth)
        return lo, hi


def true_log_spectrum(spec: ProcessSpec, field: LogSpectralField) -> np.ndarray:
    return spec.theta(np.asarray(field.freqs)[:, None], np.asarray(field.times)[None, :])


def bias_correct(field: LogSpectralField) -> LogSpectralField:
    """Remove the mean of ``ln |y|^2 - ln S``.

    Complex rows get ``+gamma``. The ``f = 0`` and ``f = 1/2`` rows hold real
    transforms whose squares are ``chi^2_1`` distributed and get the matching
    offset instead.
    """
    if field.bias_corrected:
        return field
    offset = np.full(field.shape[0], EULER_GAMMA)
    if field.freqs is not None:
        f = np.asarray(field.freqs)
        offset[np.isclose(f, 0.0) | np.isclose(f, 0.5)] = REAL_ROW_OFFSET
    return field.with_values(field.theta + offset[:, None], bias_corrected=True)


# ---------------------------------------------------------------------------
# initialization


def _moment_pair(q, p, shape, axis="time"):
    """Moments of the ``(0,p)`` and ``(q,p)`` kernels at the reference width."""
    k0 = canonical_kernel(0, p, REFERENCE_H, shape)
    kq = canonical_kernel(q, p, REFERENCE_H, shape)
    return kernel_moments(k0), kernel_moments(kq)


def _diag_rho(q, p, shape, cell_area, variance_const=PSI1):
    """Loss constant for diagonal covariance: ``C R_0 R_q dt df / (tau lambda)``."""
    m0, mq = _moment_pair(q, p, shape)
    return variance_const * m0.roughness * mq.roughness * cell_area


def scalelength_init(config: PipelineConfig, q_target: int, p_pilot: int,
                     axis: str = "time"):
    """Global pilot halfwidths from the scalelength ansatz.

    Every order-``p_pilot`` derivative in slow units is replaced by the prior
    magnitude ``theta_scale``. Returns normalized ``(h_t, h_f)`` for a
    ``(q_target, p_pilot)`` kernel on ``axis`` crossed with a
    ``(0, p_pilot)`` kernel on the other axis.
    """
    cell_area = config.overlap[0] * config.overlap[1] / (config.tau_prior * config.lambda_f_prior)
    moments = _moment_pair(q_target, p_pilot, config.kernel_shape)
    rho = _diag_rho(q_target, p_pilot, config.kernel_shape, cell_area)
    d = DerivativeBundle(config.theta_scale_prior, config.theta_scale_prior)
    sol = optimal_halfwidth(d, q_target, p_pilot, moments, rho, config.reg_b)
    if axis == "time":
        return sol.h_t, sol.h_f
    return sol.h_f, sol.h_t


def rice_criterion(field: LogSpectralField, cov: CovarianceModel, kernel_pair: SmootherSpec,
                   reflect_f0: bool = True) -> float:
    """Residual variance corrected for the smoother's self-influence.

    ``C_R = sigma^2 / (1 - 2 mu_0)`` where ``sigma^2`` is the mean squared
    difference between the field and its smooth over all cells and ``mu_0``
    is the weight the smoother puts on a cell's own noise, counting the
    correlation with neighbouring cells under ``cov`` and averaged over the
    same cells (edge kernels and folded rows included).
    """
    if kernel_pair.q:
        raise ConfigError("the residual criterion applies to (0,p) smoothers")
    low, high = _reflect_flags(field, reflect_f0)
    nf, nt = field.shape
    sf = axis_matrix(kernel_pair.freq_kernel, nf, low, high)
    st = axis_matrix(kernel_pair.time_kernel, nt)
    return _rice_value(field, sf, st, cov)


def _rice_value(field, sf, st, cov):
    resid = field.theta - sf @ field.theta @ st.T
    sigma2 = float(np.mean(resid**2))
    mu0 = operator_self_influence(sf, st, cov)
    if not mu0 < 0.5:
        return np.inf
    return sigma2 / (1.0 - 2.0 * mu0)


def _diagonal_means(mat, k_max):
    n = mat.shape[0]
    return np.array([np.mean(np.diagonal(mat, k)) if abs(k) < n else 0.0
                     for k in range(-k_max, k_max + 1)])


def operator_self_influence(sf: np.ndarray, st: np.ndarray, cov: CovarianceModel) -> float:
    """Mean over cells of ``sum_j S_ij corr(i, j)`` for ``S = sf (x) st``.

    The correlation depends only on the lattice offset, so the average
    reduces to mean diagonals of the two axis operators weighted by the
    correlation table.
    """
    if cov.kind == "diagonal":
        return float(np.trace(sf) / sf.shape[0] * np.trace(st) / st.shape[0])
    ek, ej = cov.extent
    a = _diagonal_means(sf, ek)
    b = _diagonal_means(st, ej)
    return float(a @ (cov.table / cov.variance_const) @ b)


def self_influence(kernel_pair: SmootherSpec, cov: CovarianceModel) -> float:
    """Correlation-weighted centre weight of the interior 2-D kernel."""
    kt, kf = kernel_pair.time_kernel, kernel_pair.freq_kernel
    if cov.kind == "diagonal":
        return float(kf.coeffs[kf.index_bound] * kt.coeffs[kt.index_bound])
    w = np.outer(kf.coeffs, kt.coeffs)
    dk, dj = np.meshgrid(kf.offsets, kt.offsets, indexing="ij")
    return float(np.sum(w * cov.correlation(dk, dj)))


def rice_grid(shape, h_min: float = 1.0, n: int = 12):
    """``n x n`` logarithmic grid of index halfwidth pairs ``(H_t, H_f)``."""
    nf, nt = shape
    top_t, top_f = max((nt - 1) / 4.0, h_min), max((nf - 1) / 4.0, h_min)
    ht = np.geomspace(h_min, top_t, n)
    hf = np.geomspace(h_min, top_f, n)
    return [(a, b) for a in ht for b in hf]


def rice_select(field: LogSpectralField, cov: CovarianceModel, p: int, grid,
                shape: str = "minimal_norm"):
    """Minimize the residual criterion over index halfwidth pairs.

    Returns ``(H_t, H_f, table)`` with ``table`` rows ``(H_t, H_f, C_R)``.
    """
    nf, nt = field.shape
    low, high = _reflect_flags(field, True)
    t_mats, f_mats = {}, {}
    table = []
    for ht, hf in grid:
        kt = canonical_kernel(0, p, ht, shape)
        kf = canonical_kernel(0, p, hf, shape)
        if kt.index_bound not in t_mats:
            t_mats[kt.index_bound] = axis_matrix(kt, nt)
        if kf.index_bound not in f_mats:
            f_mats[kf.index_bound] = axis_matrix(kf, nf, low, high)
        crit = _rice_value(field, f_mats[kf.index_bound], t_mats[kt.index_bound], cov)
        table.append((ht, hf, crit))
    table = np.array(table)
    best = int(np.argmin(table[:, 2]))
    return table[best, 0], table[best, 1], table


def factor_method(h_hat_0p: float, q_prime: int, p_prime: int, moments) -> float:
    """Rescale a ``(0,p')`` halfwidth to a ``(q',p')`` derivative halfwidth.

    ``moments = (moments_0p, moments_qp)``; the factor is
    ``[(4pq+2p) C(0,p)^2 R(q,p) / (2(p-q) C(q,p)^2 R(0,p))]^(1/(2p+1))``
    with ``R`` the kernel roughness.
    """
    if h_hat_0p <= 0:
        raise ConfigError("h_hat_0p must be positive")
    m0, mq = moments
    p, q = p_prime, q_prime
    num = (4 * p * q + 2 * p) * m0.c_qp**2 * mq.roughness
    den = 2 * (p - q) * mq.c_qp**2 * m0.roughness
    return h_hat_0p * (num / den) ** (1.0 / (2 * p + 1))


def smooth_global(field: LogSpectralField, h_t: float, h_f: float, tau: float, lambda_f: float,
                  p: int = 2, shape: str = "minimal_norm") -> LogSpectralField:
    """``(0,p) x (0,p)`` smooth with fixed normalized halfwidths."""
    spec = smoother_for(h_t, h_f, field.dt, field.df, tau, lambda_f, p=p, shape=shape)
    return smooth(field, spec)


# ---------------------------------------------------------------------------
# pipeline stages


def _stage(name, timings):
    class _Ctx:
        def __enter__(self):
            self.t0 = time.perf_counter()

        def __exit__(self, et, ev, tb):
            timings[name] = time.perf_counter() - self.t0
            if ev is not None and not isinstance(ev, (StageError, Warning)):
                raise StageError(name, ev) from ev
            return False
    return _Ctx()


def _index_bounds(shape, h_min):
    nf, nt = shape
    return (h_min, max((nt - 1) / 4.0, h_min)), (h_min, max((nf - 1) / 4.0, h_min))


def _pilot_derivatives(field, cov, config, p, h_pilot_t, h_pilot_f):
    """Order-``p`` derivative fields in slow units from global pilot widths.

    ``h_pilot_t`` are normalized ``(h_t, h_f)`` for the time-derivative
    smoother, ``h_pilot_f`` those for the frequency-derivative smoother.
    """
    tau, lam = config.tau_prior, config.lambda_f_prior
    (t_lo, t_hi), (f_lo, f_hi) = _index_bounds(field.shape, config.h_min)

    def clamp(h_t, h_f):
        ht = np.clip(h_t * tau / field.dt, t_lo, t_hi) * field.dt / tau
        hf = np.clip(h_f * lam / field.df, f_lo, f_hi) * field.df / lam
        return ht, hf

    ht, hf = clamp(*h_pilot_t)
    st = smoother_for(ht, hf, field.dt, field.df, tau, lam, p=p + 2, q_t=p,
                      shape=config.kernel_shape)
    dtp = smooth_derivative(field, "time", p, st) * tau**p
    ht, hf = clamp(*h_pilot_f)
    sf = smoother_for(ht, hf, field.dt, field.df, tau, lam, p=p + 2, q_f=p,
                      shape=config.kernel_shape)
    dfp = smooth_derivative(field, "freq", p, sf) * lam**p
    return dtp, dfp, st, sf


def _global_pilot_from_fields(dtp2, dfp2, config, p):
    """Pilot widths for order-``p`` derivatives from order ``p+2`` fields."""
    d = DerivativeBundle(float(np.median(np.abs(dtp2))), float(np.median(np.abs(dfp2))))
    cell_area = config.overlap[0] * config.overlap[1] / (config.tau_prior * config.lambda_f_prior)
    out = []
    for axis in ("time", "freq"):
        moments = _moment_pair(p, p + 2, config.kernel_shape)
        rho = _diag_rho(p, p + 2, config.kernel_shape, cell_area)
        bundle = d if axis == "time" else DerivativeBundle(d.dfp, d.dtp)
        sol = optimal_halfwidth(bundle, p, p + 2, moments, rho, config.reg_b)
        out.append((sol.h_t, sol.h_f) if axis == "time" else (sol.h_f, sol.h_t))
    return out


def _low_reflects(field):
    return field.freqs is not None and bool(np.isclose(field.freqs[0], 0.0))


def _max_jump(a):
    jumps = [np.abs(np.diff(a, axis=ax)).max() for ax in (0, 1) if a.shape[ax] > 1]
    return float(max(jumps)) if jumps else 0.0


def _continuity(fields, factor, margins):
    """Largest adjacent-cell jump against the interquartile range.

    ``margins`` maps each field to ``(rows, cols)`` boundary strips that are
    skipped, where edge kernels replace the interior kernel.
    """
    stats = {}
    ok = True
    for name, a in fields.items():
        mf, mt = margins[name]
        inner = a[mf: a.shape[0] - mf, mt: a.shape[1] - mt]
        if inner.size >= 4 and min(inner.shape) >= 2:
            a = inner
        q75, q25 = np.percentile(a, [75, 25])
        iqr = float(q75 - q25)
        jump = _max_jump(a)
        flagged = jump > factor * iqr if iqr > 0 else jump > 0
        stats[name] = {"max_jump": jump, "iqr": iqr, "flagged": bool(flagged)}
        ok = ok and not flagged
    return ok, stats


def run_pipeline(series: TimeSeries, config: PipelineConfig = PipelineConfig(),
                 _downgraded: bool = False) -> EstimateReport:
    """Estimate the log evolutionary spectrum of ``series``.

    Raises :class:`StageError` (wrapping the underlying error) labelled with
    the stage that failed. If the pilot derivative fields jump by more than
    ``continuity_factor`` times their interquartile range between adjacent
    cells, the run is repeated once with the final order lowered by one and
    a :class:`ContinuityWarning` is issued.
    """
    timings = {}
    diag = {"timings": timings}
    p = config.final_order
    tau, lam = config.tau_prior, config.lambda_f_prior
    p_t, p_f = config.overlap

    with _stage("taper", timings):
        n_taper, w = optimal_taper_params((tau, lam), config.taper_family,
                                          config.theta_scale_prior)
        if series.length < n_taper:
            raise DataError(f"series has {series.length} samples; the taper needs at "
                            f"least {n_taper}")
        taper = make_taper(config.taper_family, n_taper)
        diag.update(taper_N=n_taper, taper_w=w, taper_family=config.taper_family)

    with _stage("lattice", timings):
        lattice = windowed_transform(series.samples, taper, p_t, p_f)
        raw = log_point_estimate(lattice)
        fld = bias_correct(raw)
        mode = config.covariance
        if mode == "auto":
            mode = "windowed" if (p_t < 0.5 or p_f < 0.5) else "diagonal"
        cov = covariance_model(lattice, mode)
        cell_area = fld.dt * fld.df / (tau * lam)
        diag.update(lattice_shape=fld.shape, dt=fld.dt, df=fld.df, covariance=mode,
                    n_degenerate=int(raw.meta.get("n_degenerate", 0)))
        min_cells = p + 3
        if min(fld.shape) < min_cells:
            raise DataError(f"lattice {fld.shape} is too small for order-{p + 2} pilot "
                            f"kernels; need at least {min_cells} cells per axis")

    stages = config.effective_stages
    with _stage("init", timings):
        if config.init == "parametric":
            raise ConfigError("parametric initialization is not implemented")
        if config.init == "rice_factor":
            grid = (config.rice_grid if config.rice_grid is not None
                    else rice_grid(fld.shape, config.h_min))
            # self-influence must count correlation between overlapping windows
            rice_cov = cov
            if cov.kind == "diagonal" and min(p_t, p_f) < 1:
                rice_cov = covariance_model(lattice, "windowed")
            big_t, big_f, table = rice_select(fld, rice_cov, p + 2, grid, config.kernel_shape)
            diag.update(rice_evaluations=len(table), rice_choice=(big_t, big_f))
            m0, mq = _moment_pair(p, p + 2, config.kernel_shape)
            h0_t, h0_f = big_t * fld.dt / tau, big_f * fld.df / lam
            pilot_t = (factor_method(h0_t, p, p + 2, (m0, mq)), h0_f)
            pilot_f = (h0_t, factor_method(h0_f, p, p + 2, (m0, mq)))
        elif stages == "three_stage":
            # order p+2 derivatives from the ansatz, then order-p pilots from them
            a_t = scalelength_init(config, p + 2, p + 4, "time")
            a_f = scalelength_init(config, p + 2, p + 4, "freq")
            d2t, d2f, _, _ = _pilot_derivatives(fld, cov, config, p + 2, a_t, a_f)
            pilot_t, pilot_f = _global_pilot_from_fields(d2t, d2f, config, p)
        else:
            pilot_t = scalelength_init(config, p, p + 2, "time")
            pilot_f = scalelength_init(config, p, p + 2, "freq")
        diag.update(pilot_time=tuple(map(float, pilot_t)), pilot_freq=tuple(map(float, pilot_f)),
                    stages=stages, init=config.init)

    with _stage("pilot", timings):
        dtp, dfp, st, sf = _pilot_derivatives(fld, cov, config, p, pilot_t, pilot_f)
        margins = {"dtp": (0 if _low_reflects(fld) else st.freq_kernel.index_bound,
                           st.time_kernel.index_bound),
                   "dfp": (0 if _low_reflects(fld) else sf.freq_kernel.index_bound,
                           sf.time_kernel.index_bound)}
        ok, stats = _continuity({"dtp": dtp, "dfp": dfp}, config.continuity_factor, margins)
        diag["continuity"] = stats
    if not ok:
        lower = p - 2
        if lower >= 2 and not _downgraded:
            warnings.warn(f"pilot derivative fields look discontinuous; lowering the order "
                          f"from {p} to {lower}", ContinuityWarning, stacklevel=2)
            report = run_pipeline(series, replace(config, final_order=lower), _downgraded=True)
            report.diagnostics["downgraded_from"] = p
            return report
        warnings.warn(f"pilot derivative fields look discontinuous at order {p}",
                      ContinuityWarning, stacklevel=2)

    with _stage("halfwidths", timings):
        moments = _moment_pair(0, p, config.kernel_shape)
        (t_lo, t_hi), (f_lo, f_hi) = _index_bounds(fld.shape, config.h_min)
        bounds = ((t_lo * fld.dt / tau, t_hi * fld.dt / tau),
                  (f_lo * fld.df / lam, f_hi * fld.df / lam))
        rho = _diag_rho(0, p, config.kernel_shape, cell_area, cov.variance_const)
        if cov.kind != "diagonal":
            for _ in range(2):  # refine rho at the typical width under correlation
                sol = optimal_halfwidth_field(np.median(np.abs(dtp)), np.median(np.abs(dfp)),
                                              0, p, moments, rho, config.reg_b, bounds)
                spec = smoother_for(float(sol["h_t"]), float(sol["h_f"]), fld.dt, fld.df,
                                    tau, lam, p=p, shape=config.kernel_shape)
                rho = smoother_variance(spec, cov)[1]
        if config.local:
            sol = optimal_halfwidth_field(dtp, dfp, 0, p, moments, rho, config.reg_b, bounds)
        else:
            sol = optimal_halfwidth_field(np.median(np.abs(dtp)), np.median(np.abs(dfp)),
                                          0, p, moments, rho, config.reg_b, bounds)
            sol = {k: np.broadcast_to(v, fld.shape) for k, v in sol.items()}
        big_t = sol["h_t"] * tau / fld.dt
        big_f = sol["h_f"] * lam / fld.df
        if config.local and config.halfwidth_smoothing:
            # pointwise plug-ins are noisy; average log widths over the pilot support
            box = (2 * int(round(sf.freq_kernel.halfwidth)) + 1,
                   2 * int(round(st.time_kernel.halfwidth)) + 1)
            big_t = np.exp(uniform_filter(np.log(big_t), box, mode="nearest"))
            big_f = np.exp(uniform_filter(np.log(big_f), box, mode="nearest"))
        m_t = np.maximum(np.ceil(2 * big_t - 1e-12), max(p - 1, 1)).astype(int)
        m_f = np.maximum(np.ceil(2 * big_f - 1e-12), max(p - 1, 1)).astype(int)
        hw = HalfwidthField(m_t / 2.0 * fld.dt / tau, m_f / 2.0 * fld.df / lam, m_t, m_f,
                            np.asarray(sol["regularized"]), np.asarray(sol["clamped"]))
        diag.update(n_regularized=int(np.sum(hw.regularized)),
                    n_clamped=int(np.sum(hw.clamped)), rho=float(rho))

    with _stage("final", timings):
        theta = smooth_variable(fld, m_t, m_f, p, config.kernel_shape)
        theta_hat = fld.with_values(theta, meta={**fld.meta, "final_order": p})

    with _stage("report", timings):
        # the band always accounts for overlap between neighbouring windows
        band_cov = cov if cov.kind == "windowed" else covariance_model(lattice, "windowed")
        sigma = np.empty(fld.shape)
        for mt in np.unique(m_t):
            for mf in np.unique(m_f[m_t == mt]):
                spec = SmootherSpec(canonical_kernel(0, p, mt / 2.0, config.kernel_shape),
                                    canonical_kernel(0, p, mf / 2.0, config.kernel_shape))
                sigma[(m_t == mt) & (m_f == mf)] = math.sqrt(smoother_variance(spec, band_cov)[0])
        loss = expected_loss(DerivativeBundle(dtp, dfp), 0, p, moments, rho, hw.h_t, hw.h_f)
        diag["point_bias_scale"] = float(point_bias_surrogate(w, tau, lam,
                                                              config.theta_scale_prior))
        diag["mean_expected_loss"] = float(np.mean(loss))

    return EstimateReport(theta_hat=theta_hat, s_hat=np.exp(theta),
                          derivatives={"dtp": dtp, "dfp": dfp},
                          halfwidths=hw, expected_loss_field=loss,
                          confidence_halfwidth=2.0 * sigma, raw=fld, config=config,
                          diagnostics=diag)
