"""Variable selection in functional linear Cox models with group MCP penalties."""

__version__ = "0.1.0"

from .errors import ConfigurationError, FuncoxError, InputError, NumericalError
from .design import DesignBuilder, SurvivalDataset, backtransform
from .coxcore import build_risk_structure, log_partial_likelihood, expected_events
from .solver import PenaltyConfig, FitResult, fit, fit_path, path_lambda_max
from .tuning import grid_search, ebic, adaptive_weights
from .lmoments import sample_lmoments, diurnal_profiles, pseudo_covariates
from .simulate import SimConfig, StudySettings, generate_dataset, run_mc_study

__all__ = [
    "ConfigurationError", "FuncoxError", "InputError", "NumericalError",
    "DesignBuilder", "SurvivalDataset", "backtransform",
    "build_risk_structure", "log_partial_likelihood", "expected_events",
    "PenaltyConfig", "FitResult", "fit", "fit_path", "path_lambda_max",
    "grid_search", "ebic", "adaptive_weights",
    "sample_lmoments", "diurnal_profiles", "pseudo_covariates",
    "SimConfig", "StudySettings", "generate_dataset", "run_mc_study",
]
