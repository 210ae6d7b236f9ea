"""Outlier-robust doubly robust estimation of average treatment effects.

Propensities come from covariate-balancing moments, outcome models from
clipped (Huber) scores, and both are fitted jointly by SCAD-penalized
empirical likelihood. Intervals use a saddlepoint tail approximation on
the influence values of the estimate.
"""

from .ate import AteResult, aipw_baseline, dr_ate, estimate_proposed, sandwich_variance
from .ci import IntervalEstimate, bootstrap_ci, proposed_ci, wald_ci
from .data_model import ActiveSet, Dataset, ParameterBlocks, validate_dataset
from .datagen import DesignAConfig, DesignBConfig, simulate_design_a, simulate_design_b
from .exceptions import RobustATEError
from .experiments import ExperimentConfig, MetricsRecord, run
from .penalized_el import FitResult, PenaltyConfig, fit_penalized_el, select_tau

__version__ = "0.1.0"

__all__ = [
    "ActiveSet",
    "AteResult",
    "Dataset",
    "DesignAConfig",
    "DesignBConfig",
    "ExperimentConfig",
    "FitResult",
    "IntervalEstimate",
    "MetricsRecord",
    "ParameterBlocks",
    "PenaltyConfig",
    "RobustATEError",
    "aipw_baseline",
    "bootstrap_ci",
    "dr_ate",
    "estimate_proposed",
    "fit_penalized_el",
    "proposed_ci",
    "run",
    "sandwich_variance",
    "select_tau",
    "simulate_design_a",
    "simulate_design_b",
    "validate_dataset",
    "wald_ci",
]
