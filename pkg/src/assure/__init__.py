"""Almost-unbiased welfare estimation and threshold selection for compound decisions."""

from .classes import (
    CloseGaussFamily,
    Context,
    DecisionFamily,
    EnsembleFamily,
    FayHerriotFamily,
    FiniteFamily,
    LinearShrinkFamily,
    ThresholdFamily,
    TStatFamily,
    decide,
    decisions,
    family_from_config,
    integer_threshold,
    threshold,
)
from .errors import AssureError, DomainError, PreconditionError, UnsupportedOperationError
from .estimators import (
    WelfareEstimate,
    assure_derivative,
    assure_estimate,
    assure_summand,
    cb_estimate,
    cb_summand,
    estimate,
    oracle_welfare,
    poisson_assure,
    poisson_summand,
    realized_utility,
)
from .model import Bandwidth, Dataset, GroundTruth, Unit, auto_bandwidth, load_dataset, write_dataset
from .optimize import OptimizationResult, WelfareCurve, grid_argmax, implied_cost_sweep, multistart_argmax, optimize, welfare_curve

__version__ = "0.1.0"
