"""Learn-as-you-go analysis of multi-stage, multi-centre intervention trials.

Typical use::

    from lago import fit, sandwich, OptimizationProblem, optimize

    result = fit(dataset)
    problem = OptimizationProblem.from_fit(result, LINEAR_COST, -5.0, "at_most", bounds)
    rec = optimize(problem)
"""

from lago.errors import (
    ConfigError,
    EmptyDataset,
    Infeasible,
    LagoError,
    NumericalError,
    ParseError,
    RankDeficient,
    SchemaError,
    ValidationError,
)
from lago.inference import (
    ci_mean,
    confidence_band,
    confidence_set,
    delta_test,
    sandwich,
    wald_individual,
    wald_joint,
)
from lago.model import (
    InterventionPackage,
    ModelFit,
    TrialDataset,
    TrialRecord,
    build_design,
    fit,
    predict_mean,
)
from lago.optimizer import (
    CUBIC_COST,
    LINEAR_COST,
    CostFunction,
    OptimizationProblem,
    optimize,
    recommend_next_stage,
)
from lago.simulation import ScenarioConfig, eta_from_rho, run_scenario

__version__ = "0.1.0"

__all__ = [
    "CUBIC_COST",
    "LINEAR_COST",
    "ConfigError",
    "CostFunction",
    "EmptyDataset",
    "Infeasible",
    "InterventionPackage",
    "LagoError",
    "ModelFit",
    "NumericalError",
    "OptimizationProblem",
    "ParseError",
    "RankDeficient",
    "ScenarioConfig",
    "SchemaError",
    "TrialDataset",
    "TrialRecord",
    "ValidationError",
    "build_design",
    "ci_mean",
    "confidence_band",
    "confidence_set",
    "delta_test",
    "eta_from_rho",
    "fit",
    "optimize",
    "predict_mean",
    "recommend_next_stage",
    "run_scenario",
    "sandwich",
    "wald_individual",
    "wald_joint",
]
