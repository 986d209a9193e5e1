"""Multivariate Gaussian additive models with covariate-dependent covariance."""
__version__ = "0.1.0"

from .accumulate import BufferMeter, accumulate, accumulate_parsimonious, assemble, naive_assembly, plan_blocks
from .exceptions import (ConfigurationError, DataError, GamcovError, InitializationError, InsufficientDataError,
                         InvalidDimensionError, LineSearchError, NumericError, ParameterRangeError, ShapeError,
                         UnsupportedOperationError)
from .families import DerivSource, FixedCovarianceFamily, LogmFamily, McdFamily, make_family
from .fitting import FitOptions, FitState, efs_update, fit, fitted_moments, fs_update, laml, newton_map
from .layout import ThetaLayout, build_theta_layout, n_predictors, rvech, unrvech
from .logm import logm_derivs, logm_loglik, logm_sigma
from .mcd import mcd_derivs, mcd_loglik, mcd_sigma, mcd_sparsity
from .model import ModelConfig, ModelSpec, PenaltyBlock, build_model_spec, parse_config
from .simulate import ScenarioConfig, gen_parsimonious_scenario, gen_smooth_scenario
from .smooth import SmoothBasis, SmoothTerm, fit_basis

__all__ = [n for n in dir() if not n.startswith("_")]
