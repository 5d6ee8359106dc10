"""Discrete (q, p) kernels, edge kernels and crossproduct smoothing.

A kernel ``mu`` on offsets ``j`` is of type ``(q, p)`` with halfwidth ``H``
when ``sum_j j**m mu_j = q! H**q delta(m, q)`` for ``m = 0 .. p-1``. Kernels
are built as the (weighted) minimum-norm solution of that moment system, so
the moment conditions hold exactly on the grid and the diagonal variance
``sum mu**2`` is as small as possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import KernelError
from .taper_lattice import CovarianceModel, LogSpectralField

__all__ = [
    "Kernel1D",
    "KernelMoments",
    "SmootherSpec",
    "make_kernel",
    "canonical_kernel",
    "edge_kernel",
    "kernel_moments",
    "axis_matrix",
    "smooth",
    "smooth_derivative",
    "smooth_variable",
    "smoother_bias",
    "smoother_variance",
    "default_index_bound",
    "smoother_for",
]

SHAPES = ("minimal_norm", "biweight_damped")


@dataclass(frozen=True)
class Kernel1D:
    coeffs: np.ndarray
    offsets: np.ndarray
    q: int
    p: int
    halfwidth: float
    index_bound: int
    shape: str = "minimal_norm"

    @property
    def size(self) -> int:
        return self.coeffs.size

    def moment(self, m: int) -> float:
        return math.fsum(self.offsets.astype(float) ** m * self.coeffs)

    def normalized_moment(self, m: int) -> float:
        """``sum (j/H)**m mu_j``; equals ``q!`` at ``m = q`` and 0 below ``p``."""
        return math.fsum((self.offsets / self.halfwidth) ** m * self.coeffs)

    def moment_errors(self) -> np.ndarray:
        target = [math.factorial(self.q) if m == self.q else 0.0 for m in range(self.p)]
        return np.array([self.normalized_moment(m) for m in range(self.p)]) - target

    def dump(self) -> str:
        """Text dump: ``# q p H M shape`` header plus one coefficient per line."""
        head = f"# {self.q} {self.p} {self.halfwidth!r} {self.index_bound} {self.shape}"
        body = "\n".join(f"{j} {c:.17g}" for j, c in zip(self.offsets, self.coeffs))
        return head + "\n" + body + "\n"


def default_index_bound(halfwidth: float) -> int:
    return int(math.ceil(2 * halfwidth - 1e-12))


def _shape_weights(offsets, index_bound, shape):
    if shape == "minimal_norm":
        return np.ones(offsets.size)
    if shape == "biweight_damped":
        return (1.0 - (offsets / (index_bound + 1.0)) ** 2) ** 2
    raise ValueError(f"unknown kernel shape {shape!r}")


def _solve_moments(offsets, q, p, halfwidth, weights):
    """Weighted minimum-norm solution of the scaled moment system."""
    if offsets.size < p:
        raise KernelError(f"a ({q},{p}) kernel needs at least {p} coefficients, "
                          f"support has {offsets.size}")
    u = offsets / halfwidth
    rmat = np.vander(u, p, increasing=True).T          # rows: u**m
    target = np.zeros(p)
    target[q] = math.factorial(q)
    sw = np.sqrt(weights)
    a = rmat * sw
    if np.linalg.matrix_rank(a) < p:
        raise KernelError(f"moment system for ({q},{p}) is rank deficient on "
                          f"offsets {offsets.min()}..{offsets.max()}")
    z = np.linalg.lstsq(a, target, rcond=None)[0]
    mu = sw * z
    for _ in range(2):  # iterative refinement
        resid = target - rmat @ mu
        mu += sw * np.linalg.lstsq(a, resid, rcond=None)[0]
    return mu


def make_kernel(q: int, p: int, halfwidth: float, index_bound: Optional[int] = None,
                shape: str = "minimal_norm") -> Kernel1D:
    """Kernel of type ``(q, p)`` on offsets ``-M .. M``.

    ``biweight_damped`` minimizes ``sum mu_j**2 / w_j`` with
    ``w_j = (1 - (j/(M+1))**2)**2``, which makes the coefficients fall off
    smoothly towards the ends of the support.
    """
    if not (p > q >= 0):
        raise ValueError(f"need p > q >= 0, got q={q}, p={p}")
    if index_bound is None:
        index_bound = max(default_index_bound(halfwidth), (p + 1) // 2)
    if halfwidth <= 0 or halfwidth > index_bound:
        raise ValueError(f"halfwidth {halfwidth} must lie in (0, M={index_bound}]")
    if 2 * index_bound + 1 < p:
        raise KernelError(f"index bound {index_bound} gives fewer than p={p} coefficients")
    offsets = np.arange(-index_bound, index_bound + 1)
    w = _shape_weights(offsets, index_bound, shape)
    mu = _solve_moments(offsets, q, p, halfwidth, w)
    return Kernel1D(mu, offsets, q, p, float(halfwidth), int(index_bound), shape)


def edge_kernel(interior: Kernel1D, left_cut: int, right_cut: int) -> Kernel1D:
    """Re-solve the moment system after dropping offsets at either end.

    ``left_cut`` offsets are removed from the negative end and ``right_cut``
    from the positive end. Raises :class:`KernelError` if fewer than ``p``
    offsets remain.
    """
    if left_cut < 0 or right_cut < 0:
        raise ValueError("cuts must be non-negative")
    if left_cut == 0 and right_cut == 0:
        return interior
    offsets = interior.offsets[left_cut: interior.size - right_cut]
    if offsets.size < interior.p:
        raise KernelError(f"truncation leaves {offsets.size} offsets; a "
                          f"({interior.q},{interior.p}) kernel needs {interior.p}")
    w = _shape_weights(offsets, interior.index_bound, interior.shape)
    mu = _solve_moments(offsets, interior.q, interior.p, interior.halfwidth, w)
    return Kernel1D(mu, offsets, interior.q, interior.p, interior.halfwidth,
                    interior.index_bound, interior.shape)


@dataclass(frozen=True)
class KernelMoments:
    """``C(q,p)``, ``C_2(q,p)`` and the roughness of a kernel.

    ``m2`` is ``sum mu**2``. ``roughness`` is ``H * m2``: with moments
    normalized to ``q! H**q`` the weights scale like ``1/H``, so this product
    stays fixed as a kernel shape is stretched to a new halfwidth.
    """

    c_qp: float
    c2_qp: float
    m2: float
    roughness: float


def kernel_moments(kernel: Kernel1D) -> KernelMoments:
    p, h = kernel.p, kernel.halfwidth
    c = kernel.moment(p) / (math.factorial(p) * h**p)
    c2 = kernel.moment(p + 2) / (math.factorial(p + 2) * h ** (p + 2))
    m2 = float(np.sum(kernel.coeffs**2))
    return KernelMoments(c, c2, m2, m2 * h)


@lru_cache(maxsize=256)
def _cached_kernel(q, p, index_bound, shape):
    return make_kernel(q, p, index_bound / 2.0, index_bound, shape)


def canonical_kernel(q: int, p: int, halfwidth: float, shape: str = "minimal_norm") -> Kernel1D:
    """Kernel on ``M = ceil(2H)`` offsets with its halfwidth snapped to ``M/2``.

    For ``q = 0`` the coefficients depend on ``M`` alone, so snapping keeps
    the reported halfwidth and moment constants consistent with the weights.
    ``M`` is at least ``p - 1`` so that one-sided edge kernels still have
    ``p`` offsets.
    """
    m = max(default_index_bound(halfwidth), p - 1, 1)
    return _cached_kernel(q, p, m, shape)


@dataclass(frozen=True)
class SmootherSpec:
    """Crossproduct smoother: kernels per axis plus normalized halfwidths.

    ``h_t = H_T dt / tau`` and ``h_f = H_F df / lambda_f``.
    """

    time_kernel: Kernel1D
    freq_kernel: Kernel1D
    h_t: float = 1.0
    h_f: float = 1.0

    def __post_init__(self):
        if not (self.h_t > 0 and self.h_f > 0):
            raise ValueError("normalized halfwidths must be positive")
        if self.time_kernel.q and self.freq_kernel.q:
            raise ValueError("only one axis may carry a derivative order")

    @property
    def derivative_axis(self) -> Optional[str]:
        if self.time_kernel.q:
            return "time"
        if self.freq_kernel.q:
            return "freq"
        return None

    @property
    def q(self) -> int:
        return self.time_kernel.q + self.freq_kernel.q


def smoother_for(h_t: float, h_f: float, dt: float, df: float, tau: float, lambda_f: float,
                 p: int = 2, q_t: int = 0, q_f: int = 0, p_t: Optional[int] = None,
                 p_f: Optional[int] = None, shape: str = "minimal_norm") -> SmootherSpec:
    """Build a smoother from normalized halfwidths on a given lattice.

    Index halfwidths are ``H = h * scale / spacing``; kernels are snapped to
    ``M = ceil(2H)`` and the returned ``h_t``, ``h_f`` are the snapped values.
    """
    kt = canonical_kernel(q_t, p_t or p, h_t * tau / dt, shape)
    kf = canonical_kernel(q_f, p_f or p, h_f * lambda_f / df, shape)
    return SmootherSpec(kt, kf, kt.halfwidth * dt / tau, kf.halfwidth * df / lambda_f)


# ---------------------------------------------------------------------------
# smoothing


def axis_matrix(kernel: Kernel1D, n: int, reflect_low: bool = False,
                reflect_high: bool = False) -> np.ndarray:
    """Dense ``n x n`` smoothing operator along one axis.

    Rows whose kernel support crosses an end of the axis either fold the
    overhang back (even reflection about the end row) or use an edge kernel
    re-solved on the truncated support.
    """
    mat = np.zeros((n, n))
    m = kernel.index_bound
    edge_cache = {}
    for i in range(n):
        lo, hi = i - m, i + m
        left_cut = 0 if (reflect_low or lo >= 0) else -lo
        right_cut = 0 if (reflect_high or hi <= n - 1) else hi - (n - 1)
        key = (left_cut, right_cut)
        if key not in edge_cache:
            edge_cache[key] = edge_kernel(kernel, left_cut, right_cut)
        k = edge_cache[key]
        idx = i + k.offsets
        if reflect_low:
            idx = np.where(idx < 0, -idx, idx)
        if reflect_high:
            idx = np.where(idx > n - 1, 2 * (n - 1) - idx, idx)
        if idx.min() < 0 or idx.max() > n - 1:
            raise KernelError(f"kernel with M={m} does not fit an axis of length {n}")
        np.add.at(mat[i], idx, k.coeffs)
    return mat


@lru_cache(maxsize=512)
def _cached_axis_matrix(q, p, index_bound, shape, n, reflect_low, reflect_high):
    mat = axis_matrix(_cached_kernel(q, p, index_bound, shape), n, reflect_low, reflect_high)
    mat.setflags(write=False)
    return mat


def _operator(kernel: Kernel1D, n: int, reflect_low=False, reflect_high=False):
    if kernel.halfwidth * 2 == kernel.index_bound and kernel.size == 2 * kernel.index_bound + 1:
        return _cached_axis_matrix(kernel.q, kernel.p, kernel.index_bound, kernel.shape, n,
                                   bool(reflect_low), bool(reflect_high))
    return axis_matrix(kernel, n, reflect_low, reflect_high)


def _reflect_flags(field: LogSpectralField, reflect_f0: bool):
    if not reflect_f0 or field.freqs is None:
        return reflect_f0, False
    f = np.asarray(field.freqs)
    low = bool(np.isclose(f[0], 0.0))
    high = bool(np.isclose(f[-1], 0.5))
    return low, high


def smooth(field: LogSpectralField, spec: SmootherSpec, reflect_f0: bool = True) -> LogSpectralField:
    """Crossproduct kernel smooth of a lattice field.

    With ``reflect_f0`` the frequency axis is extended evenly about ``f = 0``
    (and about ``f = 1/2`` when that row is present); all other boundaries
    use edge kernels.
    """
    low, high = _reflect_flags(field, reflect_f0)
    sf = _operator(spec.freq_kernel, field.shape[0], low, high)
    st = _operator(spec.time_kernel, field.shape[1])
    return field.with_values(sf @ field.theta @ st.T)


def smooth_derivative(field: LogSpectralField, axis: str, q: int, spec: SmootherSpec,
                      reflect_f0: bool = True) -> np.ndarray:
    """Kernel estimate of ``d^q theta`` along ``axis`` in sample units.

    The raw crossproduct sum is divided by ``(H * spacing)**q``.
    """
    k_axis, k_other = ((spec.time_kernel, spec.freq_kernel) if axis == "time"
                       else (spec.freq_kernel, spec.time_kernel))
    if axis not in ("time", "freq"):
        raise ValueError(f"axis must be 'time' or 'freq', got {axis!r}")
    if k_axis.q != q or k_other.q != 0:
        raise ValueError(f"smoother orders ({k_axis.q} on {axis}, {k_other.q} on the other "
                         f"axis) do not match a derivative of order {q}")
    spacing = field.dt if axis == "time" else field.df
    out = smooth(field, spec, reflect_f0).theta
    return out / (k_axis.halfwidth * spacing) ** q


def smooth_variable(field: LogSpectralField, m_t: np.ndarray, m_f: np.ndarray, p: int = 2,
                    shape: str = "minimal_norm", reflect_f0: bool = True) -> np.ndarray:
    """Smooth with a different ``(0,p) x (0,p)`` kernel pair at every cell.

    ``m_t`` and ``m_f`` give each cell's integer index bounds; cells sharing a
    pair are evaluated together.
    """
    m_t = np.asarray(m_t, dtype=int)
    m_f = np.asarray(m_f, dtype=int)
    low, high = _reflect_flags(field, reflect_f0)
    nf, nt = field.shape
    out = np.empty(field.shape)
    for mt in np.unique(m_t):
        st = _cached_axis_matrix(0, p, int(mt), shape, nt, False, False)
        z = field.theta @ st.T
        sel_t = m_t == mt
        for mf in np.unique(m_f[sel_t]):
            sf = _cached_axis_matrix(0, p, int(mf), shape, nf, bool(low), bool(high))
            sel = sel_t & (m_f == mf)
            out[sel] = (sf @ z)[sel]
    return out


# ---------------------------------------------------------------------------
# bias and variance


def smoother_bias(spec: SmootherSpec, derivs, point_bias: float = 0.0) -> float:
    """Bias of a crossproduct estimate from the derivative bundle.

    Six terms: the order-``p`` terms on each axis, the order-``p+2`` terms,
    the mixed ``p, p`` term (with ``h_F^p h_T^p``), and the supplied
    point-estimate bias (already differentiated ``q`` times if ``q > 0``).
    ``derivs`` is anything with ``dtp, dfp, dtp2, dfp2, mixed`` attributes
    in slow-variable units; missing higher-order entries count as zero.
    """
    axis = spec.derivative_axis or "time"
    kd, ko = ((spec.time_kernel, spec.freq_kernel) if axis == "time"
              else (spec.freq_kernel, spec.time_kernel))
    hd, ho = (spec.h_t, spec.h_f) if axis == "time" else (spec.h_f, spec.h_t)
    d_own, d_other = (derivs.dtp, derivs.dfp) if axis == "time" else (derivs.dfp, derivs.dtp)
    d2_own = getattr(derivs, "dtp2" if axis == "time" else "dfp2", None) or 0.0
    d2_other = getattr(derivs, "dfp2" if axis == "time" else "dtp2", None) or 0.0
    mixed = getattr(derivs, "mixed", None) or 0.0
    q, p = kd.q, kd.p
    md, mo = kernel_moments(kd), kernel_moments(ko)
    return (mo.c_qp * d_other * ho**p / hd**q
            + md.c_qp * d_own * hd ** (p - q)
            + point_bias
            + mo.c2_qp * d2_other * ho ** (p + 2) / hd**q
            + md.c2_qp * d2_own * hd ** (p + 2 - q)
            + md.c_qp * mo.c_qp * mixed * ho**p * hd ** (p - q))


def smoother_variance(spec: SmootherSpec, cov: CovarianceModel):
    """Variance of the smoothed estimate and the loss constant ``rho``.

    Evaluates ``h^-2q sum mu_j mu_k R(j-j', k-k') mu_j' mu_k'`` through the
    autocorrelation of the 2-D weights; lags beyond the covariance table
    count as uncorrelated. ``rho = var * h_F * h_T**(2q+1)``
    (axes swapped for a frequency derivative).
    """
    af = np.correlate(spec.freq_kernel.coeffs, spec.freq_kernel.coeffs, mode="full")
    at = np.correlate(spec.time_kernel.coeffs, spec.time_kernel.coeffs, mode="full")
    kf, kt = (af.size - 1) // 2, (at.size - 1) // 2
    if cov.kind == "diagonal":
        total = cov.variance_const * af[kf] * at[kt]
    else:
        # the 2-D weights are separable, so is their autocorrelation
        ek, ej = cov.extent
        uk, uj = min(kf, ek), min(kt, ej)
        table = cov.table[ek - uk: ek + uk + 1, ej - uj: ej + uj + 1]
        total = float(af[kf - uk: kf + uk + 1] @ table @ at[kt - uj: kt + uj + 1])
    q = spec.q
    if spec.derivative_axis == "freq":
        var = total / spec.h_f ** (2 * q)
        rho = var * spec.h_t * spec.h_f ** (2 * q + 1)
    else:
        var = total / spec.h_t ** (2 * q)
        rho = var * spec.h_f * spec.h_t ** (2 * q + 1)
    return float(var), float(rho)
