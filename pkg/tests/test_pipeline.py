import math
import warnings

import numpy as np
import pytest
from scipy.special import digamma

from evospec.errors import ConfigError, DataError, StageError
from evospec.kernels import (SmootherSpec, axis_matrix, canonical_kernel, kernel_moments, smooth,
                             smooth_derivative, smoother_for)
from evospec.pipeline import (REAL_ROW_OFFSET, ContinuityWarning, PipelineConfig, bias_correct,
                              factor_method, operator_self_influence, rice_criterion, rice_grid,
                              rice_select, run_pipeline, scalelength_init, self_influence,
                              smooth_global, true_log_spectrum)
from evospec.signal_model import TimeSeries, am_modulated, chirp, simulate, stationary_white
from evospec.taper_lattice import (EULER_GAMMA, PSI1, covariance_model, log_point_estimate,
                                   make_taper, windowed_transform)


@pytest.fixture(scope="module")
def chirp_run():
    spec = chirp(tau=1000.0)
    x = simulate(spec, 3000, rng_seed=11)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_pipeline(x, PipelineConfig(theta_scale_prior=2.0))
    return spec, x, rep


def test_real_row_offset_constant():
    # E[ln(chi^2_1)] = psi(1/2) + ln 2
    assert REAL_ROW_OFFSET == pytest.approx(EULER_GAMMA + math.log(2.0), abs=1e-14)
    assert REAL_ROW_OFFSET == pytest.approx(-(digamma(0.5) + math.log(2)), abs=1e-15)


def test_bias_correction_centres_real_and_complex_rows(rng):
    x = rng.standard_normal(2**16)
    lat = windowed_transform(x, make_taper("uniform", 33), 1.0, 1.0)
    raw = log_point_estimate(lat)
    # log_point_estimate already adds gamma to every row; undo it for bias_correct
    fld = bias_correct(raw.with_values(raw.theta - EULER_GAMMA, bias_corrected=False))
    row0 = fld.theta[0]
    assert abs(row0.mean()) < 4 * math.sqrt(math.pi**2 / 2 / row0.size)
    inner = fld.theta[1:]
    assert abs(inner.mean()) < 4 * math.sqrt(PSI1 / inner.size)
    assert bias_correct(fld) is fld


def test_factor_method_identity_and_direct_formula():
    for p in (2, 4):
        m0 = kernel_moments(canonical_kernel(0, p, 4.0))
        assert factor_method(0.37, 0, p, (m0, m0)) == 0.37
    k0, k2 = canonical_kernel(0, 4, 4.0), canonical_kernel(2, 4, 4.0)
    c = lambda k: float(np.sum((k.offsets / k.halfwidth) ** 4 * k.coeffs)) / 24
    rough = lambda k: k.halfwidth * float(np.sum(k.coeffs**2))
    ratio = (4 * 4 * 2 + 2 * 4) * c(k0) ** 2 * rough(k2) / (2 * 2 * c(k2) ** 2 * rough(k0))
    got = factor_method(0.2, 2, 4, (kernel_moments(k0), kernel_moments(k2)))
    assert got == pytest.approx(0.2 * ratio ** (1 / 9), rel=1e-12)
    with pytest.raises(ConfigError):
        factor_method(0.0, 2, 4, (kernel_moments(k0), kernel_moments(k2)))


def test_rice_criterion_on_white_log_noise(rng):
    # independent cells: C_R falls towards psi'(1) as the smoother widens
    x = rng.standard_normal(2**16)
    lat = windowed_transform(x, make_taper("uniform", 33), 1.0, 1.0)
    fld = bias_correct(log_point_estimate(lat))
    cov = covariance_model(lat)
    vals = [rice_criterion(fld, cov, SmootherSpec(canonical_kernel(0, 2, h),
                                                  canonical_kernel(0, 2, h)))
            for h in (1.0, 2.0, 4.0)]
    # the real f = 0 row has three times the variance of the others
    level = PSI1 * (1 + 2 / fld.shape[0])
    assert vals[0] > vals[2]
    assert vals[2] == pytest.approx(level, rel=0.05)


def test_operator_self_influence_reduces_to_centre_weight_for_long_axes():
    kt, kf = canonical_kernel(0, 2, 2.0), canonical_kernel(0, 4, 1.5)
    lat = windowed_transform(np.ones(4000), make_taper("uniform", 21), 0.5, 0.5)
    cov = covariance_model(lat, "windowed")
    st, sf = axis_matrix(kt, 4000), axis_matrix(kf, 4000)
    assert operator_self_influence(sf, st, cov) == pytest.approx(
        self_influence(SmootherSpec(kt, kf), cov), rel=1e-2)
    diag = covariance_model(lat)
    assert operator_self_influence(sf, st, diag) == pytest.approx(
        kt.coeffs[kt.index_bound] * kf.coeffs[kf.index_bound], rel=1e-2)


def test_rice_criterion_rejects_derivative_smoothers():
    fld = log_point_estimate(windowed_transform(np.ones(200), make_taper("uniform", 9)))
    spec = SmootherSpec(canonical_kernel(1, 3, 2.0), canonical_kernel(0, 3, 2.0))
    with pytest.raises(ConfigError):
        rice_criterion(fld, covariance_model(windowed_transform(np.ones(200),
                                                                make_taper("uniform", 9))), spec)


def test_rice_grid_layout():
    grid = rice_grid((41, 81), 1.0)
    assert len(grid) == 144
    ht = sorted({g[0] for g in grid})
    hf = sorted({g[1] for g in grid})
    assert ht[0] == 1.0 and ht[-1] == pytest.approx(20.0) and hf[-1] == pytest.approx(10.0)
    assert np.allclose(np.diff(np.log(ht)), np.log(ht[1] / ht[0]))


def test_rice_select_returns_grid_minimum(rng):
    spec = chirp(tau=300.0, lambda_f=0.08)
    x = simulate(spec, 1500, rng_seed=5)
    lat = windowed_transform(x.samples, make_taper("uniform", 61), 0.5, 0.5)
    fld = bias_correct(log_point_estimate(lat))
    grid = [(1.0, 1.0), (2.0, 2.0), (3.0, 1.5)]
    cov = covariance_model(lat, "windowed")
    ht, hf, table = rice_select(fld, cov, 2, grid)
    direct = [rice_criterion(fld, cov, SmootherSpec(canonical_kernel(0, 2, a),
                                                    canonical_kernel(0, 2, b)))
              for a, b in grid]
    assert np.allclose(table[:, 2], direct, rtol=1e-12)
    assert (ht, hf) == grid[int(np.argmin(direct))]


def test_scalelength_init_scales_with_prior():
    a = scalelength_init(PipelineConfig(theta_scale_prior=1.0), 2, 4)
    b = scalelength_init(PipelineConfig(theta_scale_prior=4.0), 2, 4)
    # h^(2p+2) is proportional to 1/theta^2 at fixed aspect ratio
    assert b[0] / a[0] == pytest.approx(4.0 ** (-2 / 10), rel=1e-9)
    t = scalelength_init(PipelineConfig(), 2, 4, "time")
    f = scalelength_init(PipelineConfig(), 2, 4, "freq")
    assert t == pytest.approx(f[::-1])


def test_scalelength_pilots_near_oracle_pilots():
    # 12 tau of data: shorter records cannot resolve second time derivatives at all
    spec = chirp(tau=1000.0)
    cfg = PipelineConfig(theta_scale_prior=2.0)
    scales = np.geomspace(1 / 8, 8, 25)
    err = {"time": np.zeros(scales.size), "freq": np.zeros(scales.size)}
    for seed in range(6):
        lat = windowed_transform(simulate(spec, 12000, rng_seed=seed).samples,
                                 make_taper("uniform", 141), 0.5, 0.5)
        fld = bias_correct(log_point_estimate(lat))
        ff, tt = np.meshgrid(fld.freqs, fld.times, indexing="ij")
        (t_lo, t_hi), (f_lo, f_hi) = (1.0, (fld.shape[1] - 1) / 4), (1.0, (fld.shape[0] - 1) / 4)
        for axis, (nf, nt), scale in (("time", (0, 2), 1000.0), ("freq", (2, 0), 0.05)):
            truth = spec.theta_derivative(nf, nt)(ff, tt)
            h_t, h_f = scalelength_init(cfg, 2, 4, axis)
            for i, s in enumerate(scales):
                big_t = np.clip(h_t * s * 1000.0 / fld.dt, t_lo, t_hi)
                big_f = np.clip(h_f * s * 0.05 / fld.df, f_lo, f_hi)
                sm = smoother_for(big_t * fld.dt / 1000.0, big_f * fld.df / 0.05, fld.dt,
                                  fld.df, 1000.0, 0.05, p=4, **{f"q_{axis[0]}": 2})
                est = smooth_derivative(fld, axis, 2, sm) * scale**2
                err[axis][i] += np.mean((est - truth) ** 2)
    for axis in err:
        best = scales[np.argmin(err[axis])]
        assert 1 / 3 <= best <= 3, axis


def test_smooth_global_matches_manual_smoother(rng):
    lat = windowed_transform(rng.standard_normal(3000), make_taper("uniform", 141), 0.5, 0.5)
    fld = log_point_estimate(lat)
    spec = smoother_for(0.3, 0.4, fld.dt, fld.df, 1000.0, 0.05)
    assert np.array_equal(smooth_global(fld, 0.3, 0.4, 1000.0, 0.05).theta,
                          smooth(fld, spec).theta)


def test_pipeline_report_structure(chirp_run):
    spec, x, rep = chirp_run
    shape = rep.theta_hat.shape
    assert rep.raw.shape == shape and rep.s_hat.shape == shape
    for arr in (rep.halfwidths.h_t, rep.halfwidths.h_f, rep.expected_loss_field,
                rep.confidence_halfwidth, rep.derivatives["dtp"], rep.derivatives["dfp"]):
        assert arr.shape == shape and np.all(np.isfinite(arr))
    assert np.allclose(rep.s_hat, np.exp(rep.theta_hat.theta))
    lo, hi = rep.band
    assert np.all(lo < rep.s_hat) and np.all(rep.s_hat < hi)
    d = rep.diagnostics
    assert d["taper_N"] == 141 and d["stages"] == "two_stage" and d["covariance"] == "diagonal"
    assert set(d["timings"]) == {"taper", "lattice", "init", "pilot", "halfwidths", "final",
                                 "report"}
    assert np.all(rep.halfwidths.m_t >= 1) and np.all(rep.halfwidths.m_f >= 1)


def test_pipeline_beats_raw_estimate_and_band_covers(chirp_run):
    spec, x, rep = chirp_run
    truth = true_log_spectrum(spec, rep.theta_hat)
    mse = np.mean((rep.theta_hat.theta - truth) ** 2)
    raw = np.mean((rep.raw.theta - truth) ** 2)
    assert mse < raw / 20
    cover = np.mean(np.abs(rep.theta_hat.theta - truth) <= rep.confidence_halfwidth)
    assert cover > 0.75


def test_white_noise_estimate_is_flat_at_predicted_spread():
    # across realizations the interior estimate is centred on 0 with the predicted sd
    cfg = PipelineConfig(tau_prior=1000.0, lambda_f_prior=0.05, local=False)
    ths, sds = [], []
    for seed in range(24):
        rep = run_pipeline(simulate(stationary_white(1.0), 6000, rng_seed=seed), cfg)
        ths.append(rep.theta_hat.theta[40:100, 20:60])
        sds.append(rep.confidence_halfwidth[40:100, 20:60] / 2)
    ths = np.array(ths)
    sd = float(np.mean(sds))
    assert abs(ths.mean()) < 3 * sd / math.sqrt(len(ths))
    assert ths.std(axis=0, ddof=1).mean() == pytest.approx(sd, rel=0.1)


def test_am_envelope_tracked_far_better_than_raw():
    spec = am_modulated(0.5, 4000.0)
    x = simulate(spec, 8000, rng_seed=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_pipeline(x, PipelineConfig(tau_prior=spec.tau, lambda_f_prior=0.5))
    truth = true_log_spectrum(spec, rep.theta_hat)
    raw = np.mean((rep.raw.theta - truth) ** 2)
    assert np.mean((rep.theta_hat.theta - truth) ** 2) * 5 <= raw


def test_global_mode_uses_constant_halfwidths(chirp_run):
    spec, x, _ = chirp_run
    rep = run_pipeline(x, PipelineConfig(theta_scale_prior=2.0, local=False))
    assert np.unique(rep.halfwidths.m_t).size == 1 and np.unique(rep.halfwidths.m_f).size == 1


@pytest.mark.parametrize("kw", [dict(stages="three_stage"), dict(init="rice_factor"),
                                dict(covariance="windowed"), dict(overlap=(0.25, 0.5)),
                                dict(kernel_shape="biweight_damped"), dict(final_order=4),
                                dict(taper_family="sine")])
def test_pipeline_variants_run(chirp_run, kw):
    spec, x, _ = chirp_run
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = run_pipeline(x, PipelineConfig(theta_scale_prior=2.0, **kw))
    truth = true_log_spectrum(spec, rep.theta_hat)
    assert np.mean((rep.theta_hat.theta - truth) ** 2) < 0.1
    if kw.get("init") == "rice_factor":
        assert rep.diagnostics["rice_evaluations"] == 144
        assert rep.diagnostics["stages"] == "three_stage"
    if "overlap" in kw:
        assert rep.diagnostics["covariance"] == "windowed"


def test_short_series_fails_in_taper_stage():
    with pytest.raises(StageError) as err:
        run_pipeline(TimeSeries(np.ones(50)), PipelineConfig())
    assert err.value.stage == "taper"
    assert isinstance(err.value.__cause__, DataError)
    assert "needs at least 141" in str(err.value)


def test_parametric_init_is_a_stub():
    with pytest.raises(StageError) as err:
        run_pipeline(TimeSeries(np.random.default_rng(0).standard_normal(3000)),
                     PipelineConfig(init="parametric"))
    assert err.value.stage == "init"


@pytest.mark.parametrize("kw", [dict(stages="one_stage"), dict(init="guess"),
                                dict(final_order=0), dict(final_order=3),
                                dict(final_order=6),
                                dict(tau_prior=-1.0), dict(reg_b=1.5), dict(h_min=0.0),
                                dict(covariance="full"), dict(rice_grid=((0.5, 2.0),)),
                                dict(overlap=(0.0, 0.5))])
def test_invalid_config_rejected(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)


def test_discontinuous_pilots_lower_the_order(rng):
    x = rng.standard_normal(6000)
    x[3000:] *= 20.0
    cfg = PipelineConfig(final_order=4, tau_prior=300.0, lambda_f_prior=0.1,
                         continuity_factor=1.8)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = run_pipeline(TimeSeries(x), cfg)
    msgs = [str(w.message) for w in caught if w.category is ContinuityWarning]
    assert "lowering the order from 4 to 2" in msgs[0]
    # the step is still there at order 2, which is reported but kept
    assert msgs[1:] == ["pilot derivative fields look discontinuous at order 2"]
    assert rep.diagnostics["downgraded_from"] == 4
    assert rep.theta_hat.meta["final_order"] == 2
    assert rep.diagnostics["continuity"]["dtp"]["flagged"]


@pytest.mark.xfail(strict=True, reason="the moment-ratio factor for (2,4) is 2**(-1/9) < 1")
def test_derivative_factor_exceeds_one():
    k0, k2 = canonical_kernel(0, 4, 4.0), canonical_kernel(2, 4, 4.0)
    assert factor_method(1.0, 2, 4, (kernel_moments(k0), kernel_moments(k2))) > 1.0


def test_derivative_factor_matches_continuous_kernel_limit():
    # least-norm (0,4) and (2,4) kernels tend to (9 - 15u^2)/8 and 15(3u^2 - 1)/4 on a
    # stretched support: C = -1/280, 1/14 and roughness 9/8, 45/2 give a ratio of 1/2
    mom = (kernel_moments(canonical_kernel(0, 4, 300.0)),
           kernel_moments(canonical_kernel(2, 4, 300.0)))
    assert factor_method(1.0, 2, 4, mom) == pytest.approx(0.5 ** (1 / 9), rel=1e-5)


@pytest.mark.parametrize("qp", [(1, 3), (2, 4), (1, 4)])
def test_factor_method_is_linear_in_halfwidth(qp):
    q, p = qp
    mom = (kernel_moments(canonical_kernel(0, p, 4.0)), kernel_moments(canonical_kernel(q, p, 4.0)))
    assert factor_method(0.6, q, p, mom) == pytest.approx(2 * factor_method(0.3, q, p, mom),
                                                          rel=1e-14)


def test_initialization_schemes_agree_and_predicted_loss_ranks_them():
    spec = chirp(tau=1000.0)
    mse = {"scalelength": [], "rice_factor": []}
    pred = {"scalelength": [], "rice_factor": []}
    for seed in range(100, 110):
        x = simulate(spec, 3000, rng_seed=seed)
        for init in mse:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                rep = run_pipeline(x, PipelineConfig(theta_scale_prior=2.0, init=init))
            truth = true_log_spectrum(spec, rep.theta_hat)
            mse[init].append(np.mean((rep.theta_hat.theta - truth) ** 2))
            pred[init].append(np.mean(rep.expected_loss_field))
    a, b = np.array(mse["scalelength"]), np.array(mse["rice_factor"])
    assert np.all(np.maximum(a, b) <= 2 * np.minimum(a, b))
    better_true = min(mse, key=lambda k: np.mean(mse[k]))
    better_pred = min(pred, key=lambda k: np.mean(pred[k]))
    assert better_pred == better_true
