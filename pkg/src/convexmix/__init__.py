"""Time-varying convex mixtures of local experts."""

from .benchmark import BenchmarkSpec, gof, mae, simulate_mixture, snr_db, sweep
from .core import (
    Dataset,
    Expert,
    HyperParams,
    InvalidWeightsError,
    LossBreakdown,
    MixtureModel,
    RankDeficiencyError,
    check_weights,
    validate_weights,
)
from .estimator import ConvexMixtureRegressor
from .expert_fit import fit_experts
from .inference import GatingModel, gate_predict, predict_filtered, predict_recursive, predict_recursive_sequence, train_gating
from .io import read_model_json, write_model_json
from .objective import total_cost
from .trainer import FitReport, NumericalFailure, coordinate_descent, multistart_fit
from .weight_fit import fit_weights_windowed, solve_weights_pointwise

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSpec",
    "ConvexMixtureRegressor",
    "Dataset",
    "Expert",
    "FitReport",
    "GatingModel",
    "HyperParams",
    "InvalidWeightsError",
    "LossBreakdown",
    "MixtureModel",
    "NumericalFailure",
    "RankDeficiencyError",
    "check_weights",
    "coordinate_descent",
    "fit_experts",
    "fit_weights_windowed",
    "gate_predict",
    "gof",
    "mae",
    "multistart_fit",
    "predict_filtered",
    "predict_recursive",
    "predict_recursive_sequence",
    "read_model_json",
    "simulate_mixture",
    "snr_db",
    "solve_weights_pointwise",
    "sweep",
    "total_cost",
    "train_gating",
    "validate_weights",
    "write_model_json",
]
