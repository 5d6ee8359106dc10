import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import minimize_scalar

from evospec.errors import DataError
from evospec.taper_lattice import (EULER_GAMMA, PSI1, CovarianceModel, TaperWarning,
                                   covariance_model, log_point_estimate, make_taper,
                                   optimal_taper_params, overlap_link, point_bias_surrogate,
                                   spectral_window, spectral_window_derivative,
                                   taper_bias_moments, window_overlap, windowed_transform)

# frozen closed forms
LI2_HALF = math.pi**2 / 12 - math.log(2) ** 2 / 2  # dilogarithm at 1/2


def test_log_chi_square_constants():
    assert EULER_GAMMA == pytest.approx(0.5772156649015329, abs=1e-15)
    assert PSI1 == pytest.approx(1.6449340668482264, abs=1e-15)


@pytest.mark.parametrize("family", ["uniform", "sine"])
@pytest.mark.parametrize("n", [3, 17, 65])
def test_taper_has_unit_energy(family, n):
    tp = make_taper(family, n)
    assert np.sum(tp.coeffs**2) == pytest.approx(1.0, abs=1e-14)
    assert tp.length == n and tp.half == (n - 1) // 2


def test_taper_rejects_even_or_tiny_lengths():
    for n in (2, 4, 1, 10.5):
        with pytest.raises(ValueError):
            make_taper("uniform", n)
    with pytest.raises(ValueError):
        make_taper("kaiser", 9)


def test_spectral_window_derivative_matches_finite_difference():
    tp = make_taper("sine", 21)
    f = np.array([0.013, 0.2, 0.41])
    h = 1e-6
    fd = (spectral_window(tp, f + h) - spectral_window(tp, f - h)) / (2 * h)
    assert np.allclose(spectral_window_derivative(tp, f), fd, atol=1e-6)


def _b_bar_oracle(taper):
    # int_{-1/2}^{1/2} f^2 exp(-2 pi i m f) df = 1/12 (m = 0), (-1)^m / (2 pi^2 m^2)
    j = taper.index
    m = np.subtract.outer(j, j)
    safe = np.where(m == 0, 1, m)
    c = np.where(m == 0, 1 / 12, (-1.0) ** np.abs(m) / (2 * np.pi**2 * safe**2))
    return float(taper.coeffs @ c @ taper.coeffs) / taper.bandwidth**2


@pytest.mark.parametrize("family,n", [("uniform", 9), ("uniform", 33), ("sine", 15)])
def test_taper_bias_moments_match_series_oracles(family, n):
    tp = make_taper(family, n)
    got = taper_bias_moments(tp)
    # Parseval: int |V'|^2 = 4 pi^2 sum j^2 nu_j^2
    d_oracle = tp.bandwidth**2 * float(np.sum(tp.index**2 * tp.coeffs**2))
    assert got.d_bar == pytest.approx(d_oracle, rel=1e-10)
    assert got.b_bar == pytest.approx(_b_bar_oracle(tp), rel=1e-9)


def test_uniform_taper_time_moment_closed_form():
    n = 41
    got = taper_bias_moments(make_taper("uniform", n))
    assert got.d_bar == pytest.approx((n * n - 1) / (12 * n * n), rel=1e-10)


def test_optimal_taper_reference_case():
    n, w = optimal_taper_params((1000.0, 0.05))
    assert w == pytest.approx(math.sqrt(0.05 / 1000.0), rel=1e-15)
    assert n == 141  # nearest odd integer to 1/w = 141.42


def test_taper_length_agrees_with_grid_search_over_lengths():
    tau, lam = 400.0, 0.25
    n, w = optimal_taper_params((tau, lam))
    assert w == pytest.approx(0.025, rel=1e-12) and n == 41
    lengths = np.arange(3, 201, 2)
    best = lengths[np.argmin(point_bias_surrogate(1.0 / lengths, tau, lam))]
    assert abs(best - n) <= 2


@given(tau=st.floats(20.0, 1e5), lam=st.floats(1e-3, 0.5),
       b=st.floats(0.2, 5.0), d=st.floats(0.2, 10.0))
@settings(max_examples=60)
def test_taper_bandwidth_minimizes_point_bias(tau, lam, b, d):
    if tau / lam < 9:
        return
    _, w = optimal_taper_params((tau, lam), b_bar=b, d_bar=d)
    res = minimize_scalar(lambda lw: point_bias_surrogate(math.exp(lw), tau, lam, 1.0, b, d),
                          bracket=(math.log(w) - 1, math.log(w) + 1), tol=1e-12)
    assert math.exp(res.x) == pytest.approx(w, rel=1e-5)


def test_short_scales_clamp_taper_with_warning():
    with pytest.warns(TaperWarning):
        n, _ = optimal_taper_params((2.0, 0.5))
    assert n == 3


def test_windowed_transform_matches_direct_sum(rng):
    x = rng.standard_normal(300)
    tp = make_taper("sine", 21)
    lat = windowed_transform(x, tp, 0.5, 0.5)
    assert lat.dt == round(21 * 0.5) and lat.df == pytest.approx(0.5 / 21)
    for m, j in [(0, 0), (3, 5), (lat.n_f - 1, lat.n_t - 1)]:
        f, t = lat.freqs[m], int(lat.times[j])
        direct = sum(x[t + k] * tp.coeffs[k + tp.half] * np.exp(-2j * np.pi * f * (t + k))
                     for k in range(-tp.half, tp.half + 1))
        assert lat.values[m, j] == pytest.approx(direct, abs=1e-12)
    assert lat.times[0] - tp.half >= 0 and lat.times[-1] + tp.half <= x.size - 1


def test_short_series_is_a_data_error():
    with pytest.raises(DataError, match="shorter than the taper"):
        windowed_transform(np.zeros(10), make_taper("uniform", 21))


def test_log_point_estimate_floors_zero_power():
    lat = windowed_transform(np.zeros(64), make_taper("uniform", 9), 1.0, 1.0)
    fld = log_point_estimate(lat)
    assert fld.degenerate.all() and np.all(np.isfinite(fld.theta))
    assert fld.meta["n_degenerate"] == fld.theta.size


def _overlap_oracle(taper, delta_f, shift):
    # |E[y(f1, t) conj y(f2, t + s)]|^2 for unit white noise, by explicit loops
    acc = 0j
    for i in taper.index:
        k = i - shift
        if -taper.half <= k <= taper.half:
            acc += (taper.coeffs[i + taper.half] * taper.coeffs[k + taper.half]
                    * np.exp(-2j * np.pi * delta_f * i))
    return abs(acc) ** 2


@pytest.mark.parametrize("family", ["uniform", "sine"])
def test_window_overlap_matches_loop_oracle(family):
    tp = make_taper(family, 15)
    for df, s in [(0.0, 0), (0.02, 0), (0.0, 4), (0.031, -6), (0.1, 14), (0.05, 15)]:
        assert window_overlap(tp, df, s) == pytest.approx(_overlap_oracle(tp, df, s), abs=1e-14)


def test_overlap_link_values():
    assert overlap_link(1.0) == pytest.approx(PSI1, abs=1e-14)
    assert overlap_link(0.0) == 0.0
    assert overlap_link(0.5) == pytest.approx(LI2_HALF, abs=1e-14)
    assert overlap_link(0.5, "linear") == pytest.approx(PSI1 / 2, abs=1e-15)
    with pytest.raises(ValueError):
        overlap_link(0.5, "cubic")


def test_dilog_link_matches_monte_carlo_log_covariance(rng):
    # log-powers of complex Gaussians with squared correlation 1/2
    n = 400_000
    r = math.sqrt(0.5)
    z1 = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2)
    e = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2)
    z2 = r * z1 + math.sqrt(1 - r * r) * e
    mc = np.cov(np.log(np.abs(z1) ** 2), np.log(np.abs(z2) ** 2))[0, 1]
    assert mc == pytest.approx(overlap_link(0.5), abs=0.015)
    assert abs(mc - overlap_link(0.5, "linear")) > 0.15


@given(r2=st.floats(0.0, 1.0))
def test_dilog_link_bounded_by_linear(r2):
    assert 0.0 <= overlap_link(r2) <= overlap_link(r2, "linear") + 1e-15


def test_windowed_covariance_table_consistency(rng):
    x = rng.standard_normal(2000)
    lat = windowed_transform(x, make_taper("uniform", 33), 0.5, 0.5)
    cov = covariance_model(lat, "windowed")
    ek, ej = cov.extent
    assert cov.table[ek, ej] == pytest.approx(PSI1)
    assert np.allclose(cov.table, cov.table[::-1, ::-1], atol=1e-14)
    for dk, dj in [(0, 1), (1, 0), (2, 1), (-3, -1), (ek, ej)]:
        assert cov.covariance(dk, dj) == pytest.approx(cov.table[ek + dk, ej + dj], abs=1e-13)
    # windows two steps apart in time share no samples
    assert cov.covariance(0, ej + 1) == 0.0
    assert cov.correlation(0, 0) == pytest.approx(1.0)


def test_diagonal_covariance():
    lat = windowed_transform(np.ones(100), make_taper("uniform", 9), 1.0, 1.0)
    cov = covariance_model(lat)
    assert cov.kind == "diagonal" and cov.extent == (0, 0)
    assert cov.covariance(0, 0) == pytest.approx(PSI1)
    assert cov.covariance(1, 0) == 0.0
    with pytest.raises(ValueError):
        covariance_model(lat, "banded")


def test_covariance_model_is_plain_dataclass():
    cov = CovarianceModel("diagonal", np.array([[2.0]]), 2.0)
    assert cov.correlation(0, 0) == 1.0


def test_uniform_window_values():
    tp = make_taper("uniform", 5)
    assert np.allclose(tp.coeffs, 1 / math.sqrt(5), atol=1e-15)
    assert spectral_window(tp, 0.0) == pytest.approx(math.sqrt(5), abs=1e-14)
    assert abs(spectral_window(tp, 0.2)) < 1e-14


def test_sine_window_against_high_precision_sum():
    import mpmath as mp

    mp.mp.dps = 40
    tp = make_taper("sine", 65)
    # coefficients rebuilt in high precision from their definition on -32 .. 32
    raw = [mp.sin(mp.pi * (j + 33) / 66) for j in range(-32, 33)]
    norm = mp.sqrt(mp.fsum(c * c for c in raw))
    v = mp.fsum(c / norm * mp.exp(-2j * mp.pi * j * mp.mpf("0.01"))
                for c, j in zip(raw, range(-32, 33)))
    assert np.allclose(tp.coeffs, [float(c / norm) for c in raw], atol=1e-15)
    assert spectral_window(tp, 0.01) == pytest.approx(complex(v), abs=1e-13)


def test_bias_moment_quadrature_is_converged():
    tp = make_taper("uniform", 5)
    a, b = taper_bias_moments(tp, 100), taper_bias_moments(tp, 200)
    assert a.b_bar == pytest.approx(b.b_bar, abs=1e-8)
    assert a.d_bar == pytest.approx(b.d_bar, abs=1e-8)


def test_sine_taper_has_lighter_derivative_tail():
    # contribution of |V'|^2 beyond the bandwidth, by Gauss-Legendre quadrature
    x, wts = np.polynomial.legendre.leggauss(4000)

    def tail(tp):
        lo, hi = tp.bandwidth, 0.5
        f = lo + (hi - lo) * (x + 1) / 2
        return (hi - lo) / 2 * float(np.sum(wts * np.abs(spectral_window_derivative(tp, f)) ** 2))

    assert tail(make_taper("sine", 65)) < tail(make_taper("uniform", 65))


def test_lattice_cosine_power():
    n, f0 = 33, 4 / 33
    s = np.arange(400)
    lat = windowed_transform(np.cos(2 * np.pi * f0 * s), make_taper("uniform", n), 0.5, 1.0)
    row = int(np.argmin(np.abs(lat.freqs - f0)))
    assert lat.freqs[row] == pytest.approx(f0)
    assert np.allclose(lat.power[row], n / 4, rtol=1e-12)


def test_zero_series_gives_zero_lattice():
    lat = windowed_transform(np.zeros(100), make_taper("sine", 11))
    assert np.all(lat.values == 0)


def test_white_noise_power_has_unit_mean(rng):
    lat = windowed_transform(rng.standard_normal(2**16), make_taper("sine", 65), 1.0, 1.0)
    pw = lat.power[~lat.doubled].ravel()
    assert pw.size >= 10**4
    assert abs(pw.mean() - 1) < 3 * pw.std(ddof=1) / math.sqrt(pw.size)


def test_unit_power_gives_euler_constant():
    lat = windowed_transform(np.zeros(100), make_taper("uniform", 9))
    ones = replace(lat, values=np.ones_like(lat.values))
    assert np.allclose(log_point_estimate(ones).theta, 0.5772156649015329, atol=1e-15)


def test_white_noise_log_estimate_variance(rng):
    lat = windowed_transform(rng.standard_normal(2**15), make_taper("uniform", 65), 1.0, 1.0)
    theta = log_point_estimate(lat).theta[~lat.doubled]
    assert theta.var() == pytest.approx(PSI1, abs=0.1)


def test_windowed_table_without_overlap_is_nearly_diagonal():
    lat = windowed_transform(np.ones(3000), make_taper("uniform", 65), 1.0, 1.0)
    cov = covariance_model(lat, "windowed")
    ek, ej = cov.extent
    off = cov.table.copy()
    off[ek, ej] = 0.0
    assert cov.table[ek, ej] == PSI1
    assert np.max(np.abs(off)) <= 0.05 * PSI1


def test_sine_taper_correlation_decays_beyond_two_bandwidths():
    tp = make_taper("sine", 65)
    lat = windowed_transform(np.ones(3000), tp, 0.5, 0.25)
    cov = covariance_model(lat, "windowed")
    far = [k for k in range(1, cov.extent[0] + 1) if k * lat.df > 2 * tp.bandwidth]
    assert far
    for k in far:
        assert abs(cov.correlation(k, 0)) < 1e-3
