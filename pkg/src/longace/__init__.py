"""Time-varying average causal effect estimation from longitudinal data.

Core pieces: a minimal reverse-mode autodiff engine (`autodiff`, `nn`),
synthetic trajectory generators with an exact counterfactual oracle
(`datagen`), the recurrent targeted estimator (`model`), classical
g-method baselines (`baselines`), and a benchmark harness (`bench`, CLI
entry point `longace`).
"""

__version__ = "0.1.0"

from .datagen import (
    DGPConfig,
    Dataset,
    gen_synthetic,
    gen_semisynthetic,
    generate,
    ground_truth_ace,
    intervention_grid,
    load_dataset,
    plan_from_range,
    save_dataset,
)
from .model import (
    AceEstimate,
    FittedModel,
    ModelConfig,
    estimate_ace,
    estimate_theta,
    mc_dropout_estimates,
    train,
)
from .baselines import (
    EstimatorResult,
    RegressorSpec,
    fit_logistic,
    fit_ridge,
    iterative_gcomp,
    ltmle_glm,
    msm_ipw,
    parametric_gformula,
)

__all__ = [
    "AceEstimate",
    "DGPConfig",
    "Dataset",
    "EstimatorResult",
    "FittedModel",
    "ModelConfig",
    "RegressorSpec",
    "estimate_ace",
    "estimate_theta",
    "fit_logistic",
    "fit_ridge",
    "gen_semisynthetic",
    "gen_synthetic",
    "generate",
    "ground_truth_ace",
    "intervention_grid",
    "iterative_gcomp",
    "load_dataset",
    "ltmle_glm",
    "mc_dropout_estimates",
    "msm_ipw",
    "parametric_gformula",
    "plan_from_range",
    "save_dataset",
    "train",
]
