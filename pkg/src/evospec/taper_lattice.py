"""Tapers, windowed transforms on the Gabor lattice, and log point estimates."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import spence

from .errors import DataError
from .signal_model import TimeSeries

__all__ = [
    "Taper",
    "TaperBiasMoments",
    "TFLattice",
    "LogSpectralField",
    "CovarianceModel",
    "TaperWarning",
    "EULER_GAMMA",
    "PSI1",
    "make_taper",
    "spectral_window",
    "spectral_window_derivative",
    "taper_bias_moments",
    "point_bias_surrogate",
    "optimal_taper_params",
    "windowed_transform",
    "log_point_estimate",
    "covariance_model",
    "window_overlap",
    "overlap_link",
]

#: -psi(1); added to ln|y|^2 to remove the log-chi-square bias
EULER_GAMMA = float(np.euler_gamma)
#: psi'(1) = pi^2/6, variance of ln of an exponential variate
PSI1 = float(np.pi**2 / 6)

BANDWIDTH_CONSTANT = {"uniform": 1.0, "sine": 1.5}


class TaperWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Taper:
    coeffs: np.ndarray
    bandwidth: float
    family: str = "custom"

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size % 2 == 0:
            raise ValueError("taper length must be odd")
        if abs(np.sum(c**2) - 1.0) > 1e-12:
            raise ValueError("taper must satisfy sum(nu**2) == 1")
        object.__setattr__(self, "coeffs", c)

    @property
    def length(self) -> int:
        return self.coeffs.size

    @property
    def half(self) -> int:
        return (self.coeffs.size - 1) // 2

    @property
    def index(self) -> np.ndarray:
        return np.arange(-self.half, self.half + 1)


def make_taper(family: str, length: int) -> Taper:
    """Build a unit-energy taper of odd ``length``.

    ``uniform`` is the constant ``1/sqrt(N)``; ``sine`` is the first sine
    taper ``sin(pi k / (N + 1))``, ``k = 1..N``. The nominal bandwidth is
    ``c / N`` with ``c = 1`` and ``c = 1.5`` respectively.
    """
    if int(length) != length or length < 3 or length % 2 == 0:
        raise ValueError(f"taper length must be an odd integer >= 3, got {length}")
    n = int(length)
    if family == "uniform":
        c = np.ones(n)
    elif family == "sine":
        c = np.sin(np.pi * np.arange(1, n + 1) / (n + 1))
    else:
        raise ValueError(f"unknown taper family {family!r}")
    c = c / np.sqrt(np.sum(c**2))
    return Taper(c, BANDWIDTH_CONSTANT[family] / n, family)


def spectral_window(taper: Taper, f):
    """``V(f) = sum_j nu_j exp(-2 pi i j f)``."""
    f = np.asarray(f, dtype=float)
    return np.exp(-2j * np.pi * np.multiply.outer(f, taper.index)) @ taper.coeffs


def spectral_window_derivative(taper: Taper, f):
    """Analytic ``dV/df = sum_j (-2 pi i j) nu_j exp(-2 pi i j f)``."""
    f = np.asarray(f, dtype=float)
    j = taper.index
    return np.exp(-2j * np.pi * np.multiply.outer(f, j)) @ (-2j * np.pi * j * taper.coeffs)


@dataclass(frozen=True)
class TaperBiasMoments:
    b_bar: float
    d_bar: float


def taper_bias_moments(taper: Taper, n_nodes: Optional[int] = None) -> TaperBiasMoments:
    """Frequency- and time-bias weights of a taper.

    ``b_bar = w**-2 * int f^2 |V|^2`` and ``d_bar = w^2/(4 pi^2) int |V'|^2``
    over ``[-1/2, 1/2]``. Gauss-Legendre quadrature is used because
    ``f^2 |V(f)|^2`` is not periodic; the integrands are entire so the rule
    converges geometrically.
    """
    if n_nodes is None:
        n_nodes = 8 * taper.length + 64
    x, wts = np.polynomial.legendre.leggauss(n_nodes)
    f, wts = 0.5 * x, 0.5 * wts
    v2 = np.abs(spectral_window(taper, f)) ** 2
    dv2 = np.abs(spectral_window_derivative(taper, f)) ** 2
    w = taper.bandwidth
    return TaperBiasMoments(float(np.sum(wts * f**2 * v2)) / w**2,
                            w**2 / (4 * np.pi**2) * float(np.sum(wts * dv2)))


def point_bias_surrogate(w, tau, lambda_f, theta_scale=1.0, b_bar=1.0, d_bar=4.0):
    """Point-estimate bias under the scalelength surrogates.

    The frequency curvature term becomes ``theta_scale`` and the squared
    amplitude slope ``theta_scale / 4``. The default shape constants are the
    reference values for which both bias terms have unit weight.
    """
    w = np.asarray(w, dtype=float)
    return (theta_scale * b_bar * (w / lambda_f) ** 2
            + 0.25 * theta_scale * d_bar / (tau * w) ** 2)


def _nearest_odd(x: float) -> int:
    return int(2 * np.floor(x / 2) + 1)


def optimal_taper_params(spec_scales, family: str = "uniform", theta_scale: float = 1.0,
                         b_bar: float = 1.0, d_bar: float = 4.0):
    """Taper length and bandwidth minimizing the point-estimate bias.

    Returns ``(N, w)`` where ``w**4 = d_bar/(4 b_bar) * (lambda_f/tau)**2``
    is the exact minimizer of :func:`point_bias_surrogate` and ``N`` is the
    odd integer nearest to ``c/w`` (ties go up). With reference constants
    ``w**2 = lambda_f/tau`` and, for the uniform taper, ``N**2 ~ tau/lambda_f``.
    When ``tau/lambda_f < 9`` the length is clamped to 3 with a warning.
    """
    tau, lambda_f = spec_scales
    if not (tau > 0 and lambda_f > 0):
        raise ValueError("tau and lambda_f must be positive")
    if family not in BANDWIDTH_CONSTANT:
        raise ValueError(f"unknown taper family {family!r}")
    c = BANDWIDTH_CONSTANT[family]
    if tau / lambda_f < 9:
        warnings.warn(f"tau/lambda_f = {tau / lambda_f:.3g} < 9: taper clamped to N=3",
                      TaperWarning, stacklevel=2)
        return 3, c / 3
    w = (d_bar / (4 * b_bar)) ** 0.25 * np.sqrt(lambda_f / tau)
    return max(3, _nearest_odd(c / w)), float(w)


# ---------------------------------------------------------------------------
# lattice


@dataclass(frozen=True)
class TFLattice:
    """Complex windowed transforms on the time-frequency grid.

    ``values[m, j]`` is ``y(m * df, times[j])``. Only ``f >= 0`` is stored;
    ``doubled`` marks the rows at ``f = 0`` and ``f = 1/2`` whose variance
    carries the extra factor two.
    """

    values: np.ndarray
    dt: float
    df: float
    p_t: float
    p_f: float
    taper: Taper
    times: np.ndarray
    freqs: np.ndarray
    n_samples: int

    @property
    def n_f(self) -> int:
        return self.values.shape[0]

    @property
    def n_t(self) -> int:
        return self.values.shape[1]

    @property
    def doubled(self) -> np.ndarray:
        return np.isclose(self.freqs, 0.0) | np.isclose(self.freqs, 0.5)

    @property
    def power(self) -> np.ndarray:
        return np.abs(self.values) ** 2


def lattice_geometry(n_samples: int, taper_length: int, p_t: float, p_f: float):
    """Integer time step, effective ``p_t``, frequency step and grid axes.

    The time step ``round(N p_t)`` must be a whole number of samples, so the
    effective ``p_t`` is adjusted to keep ``dt == N p_t`` exact.
    """
    if not (0 < p_t <= 1 and 0 < p_f <= 1):
        raise ValueError("overlap parameters must lie in (0, 1]")
    n = taper_length
    if n > n_samples:
        raise DataError(f"series of length {n_samples} is shorter than the taper (N={n}); "
                        f"need at least {n} samples")
    step = max(1, int(round(n * p_t)))
    p_t_eff = step / n
    half = (n - 1) // 2
    times = np.arange(half, n_samples - half, step)
    df = p_f / n
    n_rows = int(np.floor(0.5 / df + 1e-9)) + 1
    freqs = np.arange(n_rows) * df
    return float(step), p_t_eff, df, times, freqs


def windowed_transform(x, taper: Taper, p_t: float = 0.5, p_f: float = 0.5) -> TFLattice:
    """Tapered moving Fourier transform on the Gabor lattice.

    ``y(f, t) = sum_k x[t+k] nu_k exp(-2 pi i f (t+k))`` with ``k`` running
    symmetrically over ``[-(N-1)/2, (N-1)/2]``. Window centres are placed so
    every window lies inside the data; nothing is zero-padded.
    """
    samples = x.samples if isinstance(x, TimeSeries) else np.asarray(x, dtype=float)
    dt, p_t_eff, df, times, freqs = lattice_geometry(samples.size, taper.length, p_t, p_f)
    frames = sliding_window_view(samples, taper.length)[times - taper.half]
    kern = np.exp(-2j * np.pi * np.outer(taper.index, freqs)) * taper.coeffs[:, None]
    y = (frames @ kern).T
    y *= np.exp(-2j * np.pi * np.outer(freqs, times))
    return TFLattice(y, dt, df, p_t_eff, p_f, taper, times, freqs, samples.size)


@dataclass(frozen=True)
class LogSpectralField:
    """A real field on the lattice, usually the corrected log point estimate.

    ``dt`` and ``df`` are the grid spacings (samples, cycles/sample).
    ``degenerate`` flags cells whose power was zero and got floored.
    """

    theta: np.ndarray
    dt: float = 1.0
    df: float = 1.0
    bias_corrected: bool = False
    variance_const: float = PSI1
    degenerate: Optional[np.ndarray] = None
    freqs: Optional[np.ndarray] = None
    times: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim != 2:
            raise ValueError("field must be two-dimensional (freq x time)")
        object.__setattr__(self, "theta", th)

    @property
    def shape(self):
        return self.theta.shape

    def with_values(self, theta, **changes) -> "LogSpectralField":
        return replace(self, theta=np.asarray(theta, dtype=float), **changes)


LOG_FLOOR = float(np.log(np.finfo(float).eps))


def log_point_estimate(lattice: TFLattice) -> LogSpectralField:
    """``ln|y|^2 + 0.5772``; zero-power cells are floored and flagged."""
    power = lattice.power
    degenerate = power <= 0
    with np.errstate(divide="ignore"):
        raw = np.where(degenerate, LOG_FLOOR, np.log(np.where(degenerate, 1.0, power)))
    return LogSpectralField(raw + EULER_GAMMA, lattice.dt, lattice.df, True, PSI1,
                            degenerate, lattice.freqs, lattice.times,
                            meta={"p_t": lattice.p_t, "p_f": lattice.p_f,
                                  "taper_family": lattice.taper.family,
                                  "taper_N": lattice.taper.length,
                                  "n_degenerate": int(degenerate.sum())})


# ---------------------------------------------------------------------------
# covariance of the log point estimates


@dataclass(frozen=True)
class CovarianceModel:
    """Covariance of log point estimates as a function of lattice offset.

    ``table[K + dk, J + dj]`` holds the covariance at frequency offset
    ``dk`` and time offset ``dj`` (in lattice steps). Offsets outside the
    table are evaluated on demand by :meth:`covariance`.

    ``link`` maps the squared window correlation ``|r|^2`` to a covariance:
    ``"dilog"`` uses ``Li2(|r|^2)``, exact for Gaussian data, and
    ``"linear"`` uses ``psi'(1) |r|^2``. Both equal ``psi'(1)`` at zero lag.
    """

    kind: str
    table: np.ndarray
    variance_const: float = PSI1
    taper: Optional[Taper] = None
    dt: float = 1.0
    df: float = 1.0
    link: str = "dilog"

    @property
    def extent(self):
        return (self.table.shape[0] - 1) // 2, (self.table.shape[1] - 1) // 2

    def covariance(self, dk, dj):
        dk = np.asarray(dk, dtype=int)
        dj = np.asarray(dj, dtype=int)
        if self.kind == "diagonal":
            return np.where((dk == 0) & (dj == 0), self.variance_const, 0.0)
        raw = window_overlap(self.taper, dk * self.df, np.rint(dj * self.dt).astype(int))
        raw0 = window_overlap(self.taper, 0.0, 0)
        return overlap_link(raw / raw0, self.link, self.variance_const)

    def correlation(self, dk, dj):
        return self.covariance(dk, dj) / self.variance_const


def window_overlap(taper: Taper, delta_f, shift):
    """``|int V(f1-f') V(f2-f') exp(2 pi i f' (t-t')) df'|^2`` in closed form.

    Evaluated in the time domain: the integral collapses to the lagged
    product ``sum_i nu_i nu_{i+s} exp(-2 pi i i delta_f)``.
    """
    delta_f, shift = np.broadcast_arrays(np.asarray(delta_f, dtype=float),
                                         np.asarray(shift, dtype=int))
    out = np.zeros(delta_f.shape)
    nu, n = taper.coeffs, taper.length
    idx = taper.index
    for s in np.unique(shift):
        if abs(s) >= n:
            continue
        sel = shift == s
        if s >= 0:
            prod, ii = nu[: n - s] * nu[s:], idx[: n - s]
        else:
            prod, ii = nu[-s:] * nu[: n + s], idx[-s:]
        ph = np.exp(-2j * np.pi * np.multiply.outer(delta_f[sel], ii))
        out[sel] = np.abs(ph @ prod) ** 2
    return out


def overlap_link(r2, link: str = "dilog", variance_const: float = PSI1):
    """Covariance of two log point estimates with squared correlation ``r2``."""
    r2 = np.clip(r2, 0.0, 1.0)
    if link == "dilog":
        return variance_const / PSI1 * spence(1.0 - r2)
    if link == "linear":
        return variance_const * r2
    raise ValueError(f"unknown link {link!r}")


def covariance_model(lattice: TFLattice, mode: str = "diagonal",
                     max_offsets: Optional[tuple] = None,
                     link: str = "dilog") -> CovarianceModel:
    """Diagonal (``psi'(1) I``) or windowed covariance of the log estimates.

    The windowed model correlates cells through the overlap of their
    windows, mapped to a covariance by ``link`` (see
    :class:`CovarianceModel`). Its table covers time offsets up to the
    window overlap and frequency offsets up to eight taper bandwidths, both
    capped by the lattice; ``max_offsets`` overrides the two limits.
    """
    if mode == "diagonal":
        return CovarianceModel("diagonal", np.array([[PSI1]]), PSI1, lattice.taper,
                               lattice.dt, lattice.df)
    if mode != "windowed":
        raise ValueError(f"unknown covariance mode {mode!r}")
    taper = lattice.taper
    if max_offsets is None:
        k_max = min(lattice.n_f - 1, int(np.ceil(8 * taper.bandwidth / lattice.df)))
        j_max = min(lattice.n_t - 1, int(np.ceil((taper.length - 1) / lattice.dt)))
    else:
        k_max, j_max = max_offsets
    dk, dj = np.meshgrid(np.arange(-k_max, k_max + 1), np.arange(-j_max, j_max + 1),
                         indexing="ij")
    raw = window_overlap(taper, dk * lattice.df, np.rint(dj * lattice.dt).astype(int))
    table = overlap_link(raw / raw[k_max, j_max], link)
    return CovarianceModel("windowed", table, PSI1, taper, lattice.dt, lattice.df, link)
