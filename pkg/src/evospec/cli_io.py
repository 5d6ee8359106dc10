"""Command line, configuration files, text formats and the convergence sweep.

Config files hold ``key = value`` lines whose keys carry a section prefix
(``process.``, ``taper.``, ``pipeline.``, ``sweep.``, ``output.``). Unknown
keys are rejected. Grids and series are plain text written at 17
significant digits so that reading them back is exact.
"""

from __future__ import annotations

import argparse
import hashlib
import inspect
import math
import os
import sys
import time
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from .coherence import coherence_smoother, cross_point_estimates, smooth_coherence, stabilize
from .errors import ConfigError, DataError, EvoSpecError, NumericalError
from .pipeline import PipelineConfig, run_pipeline, true_log_spectrum
from .signal_model import PRESETS, TimeSeries, make_preset, simulate
from .taper_lattice import make_taper, optimal_taper_params

__all__ = [
    "RunConfig",
    "GridFile",
    "parse_config",
    "load_config",
    "write_grid",
    "read_grid",
    "write_series",
    "read_series",
    "run_sweep",
    "SweepTable",
    "render_pgm",
    "main",
]

FMT = "%.17g"

# key -> (type, default, help)
_BASE_KEYS = {
    "process.preset": (str, "chirp", "synthetic process: " + ", ".join(sorted(PRESETS))),
    "process.n_samples": (int, 3000, "number of samples to simulate"),
    "process.seed": (int, 0, "random seed for simulation"),
    "process.n_freq_bins": (int, 0, "frequency bins of the synthesis (0: automatic)"),
    "taper.family": (str, "uniform", "taper family: uniform or sine"),
    "taper.p_t": (float, 0.5, "time overlap factor p_t (step = N p_t samples)"),
    "taper.p_f": (float, 0.5, "frequency overlap factor p_f (step = p_f / N)"),
    "pipeline.final_order": (int, 2, "kernel order p of the final smoother"),
    "pipeline.stages": (str, "two_stage", "two_stage or three_stage"),
    "pipeline.init": (str, "scalelength", "scalelength or rice_factor"),
    "pipeline.tau_prior": (float, 1000.0, "prior time scale tau (samples)"),
    "pipeline.lambda_f_prior": (float, 0.05, "prior frequency scale lambda_F (cycles/sample)"),
    "pipeline.theta_scale_prior": (float, 1.0, "prior magnitude of slow-unit derivatives"),
    "pipeline.smoothness_order": (int, 4, "declared number of continuous derivatives"),
    "pipeline.reg_b": (float, 0.1, "regularization floor b in (0, 1]"),
    "pipeline.h_min": (float, 1.0, "smallest index halfwidth (lattice steps)"),
    "pipeline.covariance": (str, "auto", "auto, diagonal or windowed"),
    "pipeline.kernel_shape": (str, "minimal_norm", "minimal_norm or biweight_damped"),
    "pipeline.continuity_factor": (float, 5.0, "jump/IQR ratio flagging a discontinuity"),
    "pipeline.local": (bool, True, "locally adaptive halfwidths"),
    "pipeline.halfwidth_smoothing": (bool, True, "average log halfwidths over the pilot support"),
    "sweep.preset": (str, "chirp", "preset for the convergence sweep"),
    "sweep.scales": (list, [25.0, 50.0, 100.0, 200.0], "tau * lambda_F values"),
    "sweep.lambda_f": (float, 0.05, "lambda_F held fixed; tau = scale / lambda_F"),
    "sweep.realizations": (int, 20, "realizations per scale"),
    "sweep.length_factor": (float, 3.0, "series length in units of tau"),
    "sweep.seed": (int, 0, "base seed"),
    "sweep.theta_scale_prior": (float, 2.0, "scalelength prior used in the sweep"),
    "output.precision": (int, 17, "significant digits in text outputs"),
}


def _preset_keys(preset: str):
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    sig = inspect.signature(PRESETS[preset])
    return {name: p.default for name, p in sig.parameters.items()}


def _convert(key, kind, raw):
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is list:
            return [float(v) for v in raw.replace(",", " ").split()]
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass
class RunConfig:
    """Parsed configuration: base keys plus preset parameters."""

    values: dict = field(default_factory=dict)
    process_params: dict = field(default_factory=dict)
    sweep_params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def canonical(self) -> str:
        items = dict(self.values)
        items.update({f"process.{k}": v for k, v in self.process_params.items()})
        items.update({f"sweep.param.{k}": v for k, v in self.sweep_params.items()})
        return "\n".join(f"{k}={items[k]!r}" for k in sorted(items))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def pipeline_config(self, **overrides) -> PipelineConfig:
        kw = {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith("pipeline.")}
        kw["overlap"] = (self["taper.p_t"], self["taper.p_f"])
        kw["taper_family"] = self["taper.family"]
        kw.update(overrides)
        return PipelineConfig(**kw)

    def process_spec(self):
        return make_preset(self["process.preset"], **self.process_params)


def parse_config(text: str, overrides: Optional[dict] = None) -> RunConfig:
    """Strict parse of ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        raw[key] = val
    raw.update(overrides or {})
    values = {k: d for k, (_, d, _) in _BASE_KEYS.items()}
    values["sweep.scales"] = list(values["sweep.scales"])
    for key, val in raw.items():
        if key in _BASE_KEYS:
            values[key] = _convert(key, _BASE_KEYS[key][0], val)
    preset_defaults = _preset_keys(values["process.preset"])
    sweep_defaults = _preset_keys(values["sweep.preset"])
    process_params, sweep_params = {}, {}
    for key, val in raw.items():
        if key in _BASE_KEYS:
            continue
        if key.startswith("process.") and key[8:] in preset_defaults:
            process_params[key[8:]] = _convert(key, float, val)
        elif key.startswith("sweep.param.") and key[12:] in sweep_defaults:
            sweep_params[key[12:]] = _convert(key, float, val)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return RunConfig(values, process_params, sweep_params)


def load_config(path: Optional[str], overrides: Optional[dict] = None) -> RunConfig:
    text = ""
    if path:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def config_help() -> str:
    lines = ["config keys (key = value):"]
    for key, (_, default, text) in _BASE_KEYS.items():
        lines.append(f"  {key} = {default}    {text}")
    lines.append("  process.<name> = preset parameter, e.g. process.tau, process.g_amplitude")
    lines.append("  sweep.param.<name> = extra parameter for the sweep preset")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# grid and series files


@dataclass
class GridFile:
    values: np.ndarray
    df: float = 1.0
    dt: float = 1.0
    p_f: float = 0.5
    p_t: float = 0.5
    taper_family: str = "uniform"
    taper_N: int = 1
    config_hash: str = "-"

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    def same_as(self, other: "GridFile") -> bool:
        return (self.values.shape == other.values.shape
                and np.array_equal(self.values, other.values, equal_nan=True)
                and (self.df, self.dt, self.p_f, self.p_t, self.taper_family, self.taper_N,
                     self.config_hash) == (other.df, other.dt, other.p_f, other.p_t,
                                           other.taper_family, other.taper_N, other.config_hash))


def write_grid(path, grid: GridFile, precision: int = 17) -> None:
    """Row-major text grid; complex cells are interleaved ``re im`` pairs."""
    v = np.atleast_2d(grid.values)
    nf, nt = v.shape
    fmt = f"%.{precision}g"
    kind = "complex" if np.iscomplexobj(v) else "real"
    head = [
        "# evospec-grid 1",
        "# nf nt df dt p_f p_t taper_family taper_N",
        "# " + " ".join([str(nf), str(nt), repr(float(grid.df)), repr(float(grid.dt)),
                         repr(float(grid.p_f)), repr(float(grid.p_t)), grid.taper_family,
                         str(int(grid.taper_N))]),
        f"# kind {kind}",
        f"# config_hash {grid.config_hash}",
    ]
    if kind == "complex":
        payload = np.empty((nf, 2 * nt))
        payload[:, 0::2], payload[:, 1::2] = v.real, v.imag
    else:
        payload = v
    with open(path, "w") as fh:
        fh.write("\n".join(head) + "\n")
        np.savetxt(fh, payload, fmt=fmt)


def read_grid(path) -> GridFile:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read grid {path}: {exc}") from None
    heads = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    if not heads or heads[0] != "evospec-grid 1":
        raise DataError(f"{path} is not a grid file")
    try:
        nf, nt, df, dt, p_f, p_t, fam, n_taper = heads[2].split()
        kind = heads[3].split()[1]
        chash = heads[4].split()[1]
        rows = [ln for ln in lines if ln and not ln.startswith("#")]
        data = np.array([[float(x) for x in ln.split()] for ln in rows], dtype=float)
        data = data.reshape(int(nf), -1)
    except (ValueError, IndexError) as exc:
        raise DataError(f"malformed grid file {path}: {exc}") from None
    if kind == "complex":
        data = data[:, 0::2] + 1j * data[:, 1::2]
    if data.shape != (int(nf), int(nt)):
        raise DataError(f"grid {path} has shape {data.shape}, header says {(nf, nt)}")
    return GridFile(data, float(df), float(dt), float(p_f), float(p_t), fam, int(n_taper), chash)


def write_series(path, series: TimeSeries, precision: int = 17) -> None:
    with open(path, "w") as fh:
        fh.write(f"# evospec-series 1\n# n_samples {series.length} seed {series.seed} "
                 f"sample_interval {series.sample_interval!r}\n")
        np.savetxt(fh, series.samples, fmt=f"%.{precision}g")


def read_series(path) -> TimeSeries:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read series {path}: {exc}") from None
    seed, interval = None, 1.0
    for ln in lines:
        if ln.startswith("# n_samples"):
            parts = ln[1:].split()
            meta = dict(zip(parts[0::2], parts[1::2]))
            seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
            interval = float(meta.get("sample_interval", 1.0))
    try:
        x = np.array([float(ln) for ln in lines if ln.strip() and not ln.startswith("#")])
    except ValueError as exc:
        raise DataError(f"malformed series file {path}: {exc}") from None
    if x.size == 0:
        raise DataError(f"series file {path} holds no samples")
    return TimeSeries(x, interval, seed)


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, entries: dict) -> None:
    with open(path, "w") as fh:
        for k, v in entries.items():
            fh.write(f"{k}: {v}\n")


# ---------------------------------------------------------------------------
# convergence sweep


@dataclass
class SweepTable:
    """Per-scale MSE means and standard errors plus fitted log-log slopes."""

    scales: np.ndarray
    mse_point: np.ndarray
    mse_global: np.ndarray
    mse_local: np.ndarray
    se_global: np.ndarray
    se_local: np.ndarray
    realizations: int
    slope_local: float
    slope_global: float
    slope_ci: tuple
    degenerate: bool

    def to_text(self, precision: int = 17) -> str:
        g = lambda v: f"{v:.{precision}g}"
        out = ["# scale mse_point mse_global mse_local se_global se_local"]
        for row in zip(self.scales, self.mse_point, self.mse_global, self.mse_local,
                       self.se_global, self.se_local):
            out.append(" ".join(g(v) for v in row))
        out.append(f"# realizations {self.realizations}")
        out.append(f"# slope_local {g(self.slope_local)}")
        out.append(f"# slope_global {g(self.slope_global)}")
        out.append(f"# slope_ci {g(self.slope_ci[0])} {g(self.slope_ci[1])}")
        out.append(f"# slope_ci_degenerate {int(self.degenerate)}")
        return "\n".join(out) + "\n"


def _fit_slope(x, y, se):
    lx, ly = np.log(x), np.log(y)
    slope = float(np.polyfit(lx, ly, 1)[0]) if len(x) >= 2 else float("nan")
    se_log = se / y
    if len(x) < 3 or not np.all(np.isfinite(se_log)):
        return slope, (float("nan"), float("nan")), True
    res = stats.linregress(lx, ly)
    half = 2.0 * math.hypot(res.stderr, float(np.sqrt(np.sum(se_log**2)) / np.ptp(lx)))
    return slope, (slope - half, slope + half), False


def run_sweep(cfg: RunConfig, log=None) -> SweepTable:
    """MSE of point, global and local estimates over ``tau * lambda_F`` scales.

    ``tau = scale / lambda_F`` and series have ``length_factor * tau``
    samples. Priors are set to the true scales.
    """
    lam = cfg["sweep.lambda_f"]
    reps = cfg["sweep.realizations"]
    if reps < 1:
        raise ConfigError("sweep.realizations must be at least 1")
    preset = cfg["sweep.preset"]
    rows = []
    for i, scale in enumerate(cfg["sweep.scales"]):
        tau = scale / lam
        n = int(round(cfg["sweep.length_factor"] * tau))
        params = dict(cfg.sweep_params)
        accepted = _preset_keys(preset)
        if "tau" in accepted:
            params.setdefault("tau", tau)
        if "lambda_f" in accepted:
            params.setdefault("lambda_f", lam)
        if "center_t" in accepted:
            params.setdefault("center_t", n / 2.0)
        spec = make_preset(preset, **params)
        base = cfg.pipeline_config(tau_prior=tau, lambda_f_prior=lam,
                                   theta_scale_prior=cfg["sweep.theta_scale_prior"])
        mse = []
        for r in range(reps):
            x = simulate(spec, n, rng_seed=cfg["sweep.seed"] + 1000 * i + r)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                loc = run_pipeline(x, replace(base, local=True))
                glo = run_pipeline(x, replace(base, local=False))
            truth = true_log_spectrum(spec, loc.theta_hat)
            mse.append([np.mean((loc.raw.theta - truth) ** 2),
                        np.mean((glo.theta_hat.theta - truth) ** 2),
                        np.mean((loc.theta_hat.theta - truth) ** 2)])
        mse = np.array(mse)
        se = mse.std(axis=0, ddof=1) / np.sqrt(reps) if reps > 1 else np.full(3, np.nan)
        rows.append((scale, *mse.mean(axis=0), se[1], se[2]))
        if log:
            log(f"scale {scale:g}: local MSE {rows[-1][3]:.4g}")
    t = np.array(rows)
    slope, ci, degenerate = _fit_slope(t[:, 0], t[:, 3], t[:, 5])
    slope_g = _fit_slope(t[:, 0], t[:, 2], t[:, 4])[0]
    return SweepTable(t[:, 0], t[:, 1], t[:, 2], t[:, 3], t[:, 4], t[:, 5], reps,
                      slope, slope_g, ci, degenerate)


# ---------------------------------------------------------------------------
# rendering


def render_pgm(values: np.ndarray, scale: str = "linear", maxval: int = 255) -> np.ndarray:
    """Map a grid to integer gray levels ``0 .. maxval`` (row order kept)."""
    v = np.asarray(values, dtype=float)
    if np.iscomplexobj(values):
        v = np.abs(values)
    if scale == "log":
        if np.any(v <= 0):
            raise DataError("log scaling needs strictly positive values")
        v = np.log(v)
    elif scale != "linear":
        raise ConfigError(f"scale must be linear or log, got {scale!r}")
    lo, hi = float(np.min(v)), float(np.max(v))
    if hi == lo:
        return np.zeros(v.shape, dtype=int)
    return np.rint((v - lo) / (hi - lo) * maxval).astype(int)


def _write_pgm(path, pix: np.ndarray, maxval: int = 255) -> None:
    nrow, ncol = pix.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{ncol} {nrow}\n{maxval}\n")
        for row in pix:
            fh.write(" ".join(str(int(p)) for p in row) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _overrides(args) -> dict:
    out = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _check_written(pairs):
    for path, grid in pairs:
        if not read_grid(path).same_as(grid):
            raise NumericalError(f"{path} did not round-trip")


def cmd_simulate(args) -> int:
    ov = _overrides(args)
    if args.preset:
        ov["process.preset"] = args.preset
    if args.n_samples is not None:
        ov["process.n_samples"] = str(args.n_samples)
    if args.seed is not None:
        ov["process.seed"] = str(args.seed)
    cfg = load_config(args.config, ov)
    spec = cfg.process_spec()
    nb = cfg["process.n_freq_bins"] or None
    series = simulate(spec, cfg["process.n_samples"], nb, rng_seed=cfg["process.seed"])
    write_series(args.out, series, cfg["output.precision"])
    back = read_series(args.out)
    if not np.array_equal(back.samples, series.samples):
        raise NumericalError(f"{args.out} did not round-trip")
    return 0


def _grid_meta(report_or_field, cfg, n_taper):
    f = report_or_field
    return dict(df=f.df, dt=f.dt, p_f=cfg["taper.p_f"], p_t=cfg["taper.p_t"],
                taper_family=cfg["taper.family"], taper_N=n_taper, config_hash=cfg.config_hash)


def cmd_estimate(args) -> int:
    ov = _overrides(args)
    if args.init:
        ov["pipeline.init"] = args.init
    cfg = load_config(args.config, ov)
    series = read_series(args.input)
    t0 = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        rep = run_pipeline(series, cfg.pipeline_config())
    d = rep.diagnostics
    meta = _grid_meta(rep.theta_hat, cfg, d["taper_N"])
    prefix = args.out_prefix
    outputs = {
        "theta": rep.theta_hat.theta,
        "s": rep.s_hat,
        "h_t": rep.halfwidths.h_t,
        "h_f": rep.halfwidths.h_f,
        "loss": rep.expected_loss_field,
        "confidence": rep.confidence_halfwidth,
    }
    written = []
    for name, values in outputs.items():
        path = f"{prefix}.{name}.grid"
        grid = GridFile(np.asarray(values, dtype=float), **meta)
        write_grid(path, grid, cfg["output.precision"])
        written.append((path, grid))
    _check_written(written)
    manifest = {
        "command": "estimate",
        "input": args.input,
        "input_sha256": _sha(args.input),
        "config_hash": cfg.config_hash,
        "seed": series.seed,
        "stages": d["stages"],
        "init": d["init"],
        "final_order": rep.theta_hat.meta.get("final_order"),
        "taper": f"{d['taper_family']} N={d['taper_N']} w={d['taper_w']!r}",
        "lattice_shape": f"{d['lattice_shape'][0]} {d['lattice_shape'][1]}",
        "covariance": d["covariance"],
        "rice_evaluations": d.get("rice_evaluations", 0),
        "n_regularized": d["n_regularized"],
        "n_clamped": d["n_clamped"],
        "n_degenerate": d["n_degenerate"],
        "warnings": len(caught),
        "elapsed_s": f"{time.perf_counter() - t0:.3f}",
    }
    for stage, secs in d["timings"].items():
        manifest[f"timing.{stage}"] = f"{secs:.4f}"
    for name, st in d["continuity"].items():
        manifest[f"continuity.{name}"] = (f"max_jump={st['max_jump']!r} iqr={st['iqr']!r} "
                                          f"flagged={int(st['flagged'])}")
    for path, _ in written:
        manifest[f"output.{Path(path).name}"] = _sha(path)
    _write_manifest(f"{prefix}.manifest.txt", manifest)
    return 0


def cmd_coherence(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    a, b = read_series(args.input_a), read_series(args.input_b)
    pc = cfg.pipeline_config()
    n_taper, _ = optimal_taper_params((pc.tau_prior, pc.lambda_f_prior), pc.taper_family,
                                      pc.theta_scale_prior)
    if a.length < n_taper:
        raise DataError(f"series has {a.length} samples; the taper needs at least {n_taper}")
    taper = make_taper(pc.taper_family, n_taper)
    cf = stabilize(cross_point_estimates(a, b, taper, pc.overlap))
    spec = coherence_smoother(cf, pc.tau_prior, pc.lambda_f_prior, pc.final_order)
    sm = smooth_coherence(cf, spec)
    meta = dict(df=cf.df, dt=cf.dt, p_f=pc.overlap[1], p_t=pc.overlap[0],
                taper_family=pc.taper_family, taper_N=n_taper, config_hash=cfg.config_hash)
    written = []
    for name, values in {"coherence": sm.coherence_mag, "q": sm.q_field,
                         "phase": sm.gamma}.items():
        path = f"{args.out_prefix}.{name}.grid"
        grid = GridFile(values, **meta)
        write_grid(path, grid, cfg["output.precision"])
        written.append((path, grid))
    _check_written(written)
    manifest = {"command": "coherence", "config_hash": cfg.config_hash,
                "undefined_phase_cells": int(np.sum(~sm.phase_defined))}
    for path, _ in written:
        manifest[f"output.{Path(path).name}"] = _sha(path)
    _write_manifest(f"{args.out_prefix}.manifest.txt", manifest)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    table = run_sweep(cfg, log=lambda m: print(m, file=sys.stderr))
    text = table.to_text(cfg["output.precision"])
    Path(args.out).write_text(text)
    if Path(args.out).read_text() != text:
        raise NumericalError(f"{args.out} did not round-trip")
    return 0


def cmd_render(args) -> int:
    grid = read_grid(args.input)
    pix = render_pgm(grid.values, args.scale)
    _write_pgm(args.out, pix)
    nf, nt = grid.values.shape
    side = [f"rows {nf} frequency from 0 step {grid.df!r} (row 0 first)",
            f"cols {nt} time step {grid.dt!r}",
            f"scale {args.scale}",
            f"min {float(np.min(np.abs(grid.values) if grid.is_complex else grid.values))!r}",
            f"max {float(np.max(np.abs(grid.values) if grid.is_complex else grid.values))!r}"]
    Path(str(args.out) + ".txt").write_text("\n".join(side) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="evospec", description="Plug-in estimation of evolutionary spectra.",
        epilog=config_help() + "\n\nexit codes: 0 ok, 2 config error, 3 data error, "
               "4 numerical failure. EVOSPEC_THREADS caps BLAS threads.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("simulate", help="simulate a preset process")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate the log spectrum of a series")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--init", choices=["scalelength", "rice_factor"])
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("coherence", help="coherence and phase of two series")
    common(p)
    p.add_argument("--input-a", required=True)
    p.add_argument("--input-b", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_coherence)

    p = sub.add_parser("sweep", help="MSE against tau * lambda_F")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("render", help="grid file to a plain PGM heatmap")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scale", choices=["linear", "log"], default="linear")
    p.set_defaults(func=cmd_render)
    return ap


def _limit_threads():
    n = os.environ.get("EVOSPEC_THREADS")
    if not n:
        return None
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        return None
    return threadpool_limits(int(n))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _limit_threads()
    try:
        return args.func(args)
    except EvoSpecError as exc:
        print(f"evospec {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, ArithmeticError) as exc:
        print(f"evospec {args.command}: {exc}", file=sys.stderr)
        return 4 if isinstance(exc, ArithmeticError) else 2


if __name__ == "__main__":
    sys.exit(main())
