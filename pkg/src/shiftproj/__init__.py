"""Extreme dimension reduction for importance-weighted learning under covariate shift."""

from .baselines import BaselineSpec, run_baseline, sir_directions
from .data import TrainTestPair
from .density_ratio import (
    KernelBasis,
    RatioModel,
    WeightVector,
    effective_sample_size,
    kernel_features,
    predict_weights,
    ratio_cv,
    ulsif_fit,
)
from .errors import InputError, NumericalError
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    emit_report,
    run_experiment,
)
from .shift_induction import (
    ShiftSpec,
    induce_shift,
    pick_predictive_vector,
    subgroup_split,
)
from .subspace_search import (
    HyperParams,
    Projection,
    SearchConfig,
    SearchResult,
    evaluate_objective,
    gradient_check_report,
    holdout_loss,
    search,
    total_gradient,
)
from .synthetic import (
    GaussianShiftSpec,
    analytic_ratio,
    gen_example1,
    gen_example2,
    weight_second_moment_check,
)
from .weighted_model import (
    FitResult,
    LinearModel,
    LossSpec,
    PipelineCandidate,
    eval_loss,
    iwcv_select,
    weighted_fit,
    weighted_loss,
)

__version__ = "0.1.0"

__all__ = [
    "BaselineSpec",
    "ExperimentConfig",
    "ExperimentReport",
    "FitResult",
    "GaussianShiftSpec",
    "HyperParams",
    "InputError",
    "KernelBasis",
    "LinearModel",
    "LossSpec",
    "NumericalError",
    "PipelineCandidate",
    "Projection",
    "RatioModel",
    "SearchConfig",
    "SearchResult",
    "ShiftSpec",
    "TrainTestPair",
    "WeightVector",
    "analytic_ratio",
    "effective_sample_size",
    "emit_report",
    "eval_loss",
    "evaluate_objective",
    "gen_example1",
    "gen_example2",
    "gradient_check_report",
    "holdout_loss",
    "induce_shift",
    "iwcv_select",
    "kernel_features",
    "pick_predictive_vector",
    "predict_weights",
    "ratio_cv",
    "run_baseline",
    "run_experiment",
    "search",
    "sir_directions",
    "subgroup_split",
    "total_gradient",
    "ulsif_fit",
    "weighted_fit",
    "weighted_loss",
    "weight_second_moment_check",
]
