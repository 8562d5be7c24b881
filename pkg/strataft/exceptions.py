"""
Custom Exceptions for strataft

Input-side failures map to CLI exit code 1, non-convergence to 2 and numeric
estimation failures to 3 (see strataft.cli).
"""

from typing import List, Optional

import numpy as np


class StratAftError(Exception):
    """Base class for all strataft errors."""
    pass


class DataLoadError(StratAftError):
    """Raised when a required data file cannot be loaded."""
    pass


class SchemaValidationError(StratAftError):
    """Raised when loaded data does not match the required schema."""
    pass


class DataQualityError(StratAftError):
    """Raised when blocking dataset quality gates fail."""
    pass


class DesignError(StratAftError):
    """Raised when strata counts, sampling flags and weights are inconsistent."""
    pass


class ConfigError(StratAftError):
    """Raised when a configuration value violates its invariant."""
    pass


class EstimationError(StratAftError):
    """Base class for failures inside the estimation machinery."""
    pass


class InsufficientDataError(EstimationError):
    """Raised when a moment estimator has a non-positive denominator."""
    pass


class StructureNotApplicableError(EstimationError):
    """Raised when a working correlation structure cannot be estimated for the data."""
    pass


class NumericError(EstimationError):
    """Raised when a matrix that must be positive definite is not."""
    pass


class DegenerateSurvivalError(EstimationError):
    """Raised when the weighted Kaplan-Meier fit has no positively weighted events."""
    pass


class DegenerateDesignError(EstimationError):
    """Raised when all weights entering the estimating equation are zero."""
    pass


class RankDeficiencyError(EstimationError):
    """Raised when a linear system in the solver is numerically singular."""
    pass


class NonConvergenceError(EstimationError):
    """Raised when an iteration exceeds its budget without meeting the tolerance."""

    def __init__(
        self,
        message: str,
        trace: Optional[List[float]] = None,
        last_estimate: Optional[np.ndarray] = None,
    ):
        super().__init__(message)
        self.trace = list(trace or [])
        self.last_estimate = last_estimate


class TuningError(StratAftError):
    """Raised when cross-validation leaves no usable tuning parameter."""
    pass


class VarianceError(StratAftError):
    """Raised when resampling variance estimation cannot start."""
    pass


class CalibrationError(StratAftError):
    """Raised when censoring calibration cannot bracket or hit its target."""
    pass


class SamplingError(StratAftError):
    """Raised when stratified sampling leaves a populated stratum unsampled."""
    pass


class SimulationAbortError(StratAftError):
    """Raised when too many simulation replications fail."""
    pass
