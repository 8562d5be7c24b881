"""Monte Carlo engine: clustered AFT data generation, stratified sampling and study metrics."""

from strataft.simulation.generators import (
    Cohort,
    ErrorMarginal,
    calibrate_censoring,
    gen_clayton_errors,
    gen_covariates,
    generate_cohort,
)
from strataft.simulation.metrics import EstimationMetrics, SelectionMetrics
from strataft.simulation.sampling import stratify_and_sample
from strataft.simulation.study import (
    MethodSpec,
    SimulationScenario,
    StudyResult,
    default_methods,
    run_study,
)

__all__ = [
    "Cohort",
    "ErrorMarginal",
    "EstimationMetrics",
    "MethodSpec",
    "SelectionMetrics",
    "SimulationScenario",
    "StudyResult",
    "calibrate_censoring",
    "default_methods",
    "gen_clayton_errors",
    "gen_covariates",
    "generate_cohort",
    "run_study",
    "stratify_and_sample",
]
