"""Estimation of time-varying (evolutionary) spectra by smoothing log
point estimates on a time-frequency lattice with plug-in optimal kernels."""

from .errors import ConfigError, DataError, EvoSpecError, KernelError, NumericalError, StageError
from .signal_model import ProcessSpec, TimeSeries, make_preset, simulate
from .taper_lattice import (LogSpectralField, Taper, covariance_model, log_point_estimate,
                            make_taper, optimal_taper_params, windowed_transform)
from .kernels import SmootherSpec, make_kernel, edge_kernel, kernel_moments, smooth
from .loss_optimizer import DerivativeBundle, expected_loss, optimal_halfwidth
from .pipeline import PipelineConfig, run_pipeline
from .coherence import cross_point_estimates, smooth_coherence, stabilize

__version__ = "0.1.0"
