"""
Multiplier-Resampling Variance after Selection

The unpenalized model is refit on the selected covariates; each replicate then
re-solves it with cluster weights Z_i ω_i, where Z_i are i.i.d. multipliers with
unit mean and variance. Every weighted quantity (X̄, φ̂/α̂, the Kaplan-Meier, U)
sees the perturbed weights. Standard errors come from the empirical covariance
of the replicate estimates, intervals are Wald.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from strataft.data_model import ClusteredDataset
from strataft.exceptions import ConfigError, EstimationError, VarianceError
from strataft.pgee_solver import FitResult, PenaltySpec, SolverConfig, fit
from strataft.working_correlation import CorrelationKind

logger = logging.getLogger(__name__)

# Share of converged replicates below which the variance is flagged unreliable
MIN_CONVERGED_SHARE = 0.8

PSD_TOL = 1e-10


class MultiplierLaw(str, Enum):
    EXPONENTIAL = "exp"
    TWOPOINT = "twopoint"
    DEGENERATE = "one"

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw `size` multipliers with E(Z) = Var(Z) = 1 (Z ≡ 1 for the degenerate law)."""
        if self is MultiplierLaw.EXPONENTIAL:
            return rng.exponential(1.0, size)
        if self is MultiplierLaw.TWOPOINT:
            return 2.0 * rng.integers(0, 2, size)
        return np.ones(size)


@dataclass(frozen=True)
class ResampleConfig:
    B: int = 200
    law: MultiplierLaw = MultiplierLaw.EXPONENTIAL
    seed: int = 0
    refit_active_only: bool = True
    level: float = 0.95
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "law", MultiplierLaw(self.law))
        if self.B < 2:
            raise ConfigError(f"Resampling needs B ≥ 2 replicates, got {self.B}")
        if not 0 < self.level < 1:
            raise ConfigError(f"Confidence level must lie in (0, 1), got {self.level}")
        if self.workers < 1:
            raise ConfigError(f"workers must be ≥ 1, got {self.workers}")


@dataclass(frozen=True, eq=False)
class VarianceResult:
    """Resampling standard errors and Wald intervals over the refit coefficient set."""

    names: Tuple[str, ...]
    columns: Tuple[int, ...]
    estimate: np.ndarray
    refit_estimate: np.ndarray
    se: np.ndarray
    covariance: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    B: int
    B_effective: int
    unreliable: bool = False
    note: str = field(default="")

    @property
    def significant(self) -> np.ndarray:
        return (self.ci_lower > 0) | (self.ci_upper < 0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "name": list(self.names),
                "estimate": self.estimate,
                "se": self.se,
                "ci_lower": self.ci_lower,
                "ci_upper": self.ci_upper,
                "significant": self.significant,
            }
        )

    def summary(self) -> dict:
        return {
            "level": self.level,
            "B": self.B,
            "B_effective": self.B_effective,
            "unreliable": self.unreliable,
            "note": self.note,
        }


def wald_ci(estimate, se, level: float = 0.95):
    """estimate ± z_{(1+level)/2} · se."""
    if not 0 < level < 1:
        raise ConfigError(f"Confidence level must lie in (0, 1), got {level}")
    z = stats.norm.ppf(0.5 + level / 2)
    estimate = np.asarray(estimate, dtype=float)
    half = z * np.asarray(se, dtype=float)
    lo, hi = estimate - half, estimate + half
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def _replicate(
    b: int,
    dataset: ClusteredDataset,
    rconfig: ResampleConfig,
    config: SolverConfig,
    structure: CorrelationKind,
    start: np.ndarray,
) -> Optional[np.ndarray]:
    rng = np.random.default_rng([rconfig.seed, b])
    Z = rconfig.law.draw(rng, len(dataset.clusters))
    perturbed = dataset.with_weights(Z * dataset.weights)
    try:
        result = fit(perturbed, PenaltySpec.unpenalized(), config, structure, start)
    except EstimationError as e:
        logger.debug(f"Replicate {b} failed: {e}")
        return None
    if not result.converged:
        logger.debug(f"Replicate {b} did not converge")
        return None
    return result.beta_raw


def _empty_result(rconfig: ResampleConfig, note: str) -> VarianceResult:
    empty = np.zeros(0)
    return VarianceResult(
        names=(),
        columns=(),
        estimate=empty,
        refit_estimate=empty,
        se=empty,
        covariance=np.zeros((0, 0)),
        ci_lower=empty,
        ci_upper=empty,
        level=rconfig.level,
        B=rconfig.B,
        B_effective=0,
        note=note,
    )


def resample_variance(
    dataset: ClusteredDataset,
    point_fit: FitResult,
    rconfig: ResampleConfig,
    config: SolverConfig,
    structure: Union[str, CorrelationKind],
    progress: bool = False,
) -> VarianceResult:
    """
    Multiplier-resampling covariance of the post-selection unpenalized refit.

    Args:
        dataset: Full dataset used for the point fit
        point_fit: Converged (penalized or unpenalized) fit
        rconfig: Replicate count, multiplier law, seed, level, workers
        config: Solver configuration for every refit
        structure: Working correlation kind of the point fit
        progress: Show a tqdm progress bar

    Returns:
        VarianceResult; intervals are centered at the point fit's estimates

    Raises:
        VarianceError: If the point fit or the refit did not converge, fewer than
            two replicates converged, or the covariance is not PSD
    """
    kind = CorrelationKind.parse(structure)
    if not point_fit.converged:
        raise VarianceError("Variance requires a converged point fit")

    columns = point_fit.active_set if rconfig.refit_active_only else tuple(range(dataset.p))
    if not columns:
        logger.warning("Active set is empty; no coefficients to resample")
        return _empty_result(rconfig, "empty active set")

    subset = dataset.select_covariates(columns)
    try:
        refit = fit(
            subset, PenaltySpec.unpenalized(), config, kind, point_fit.beta_raw[list(columns)]
        )
    except EstimationError as e:
        raise VarianceError(f"Unpenalized refit on the active set failed: {e}") from e
    if not refit.converged:
        raise VarianceError("Unpenalized refit on the active set did not converge")

    task = partial(
        _replicate,
        dataset=subset,
        rconfig=rconfig,
        config=config,
        structure=kind,
        start=refit.beta_raw,
    )
    indices = range(rconfig.B)
    if rconfig.workers > 1:
        with ProcessPoolExecutor(max_workers=rconfig.workers) as executor:
            replicates = list(
                tqdm(executor.map(task, indices), total=rconfig.B, desc="Resampling", disable=not progress)
            )
    else:
        replicates = [task(b) for b in tqdm(indices, desc="Resampling", disable=not progress)]

    kept = [r for r in replicates if r is not None]
    B_eff = len(kept)
    if B_eff < 2:
        raise VarianceError(f"Only {B_eff} of {rconfig.B} replicates converged")
    unreliable = B_eff < MIN_CONVERGED_SHARE * rconfig.B
    if unreliable:
        logger.warning(
            f"Only {B_eff} of {rconfig.B} replicates converged; variance flagged unreliable"
        )

    reps = np.vstack(kept)
    # Centering on the first replicate leaves the covariance unchanged and keeps Z ≡ 1 exact
    covariance = np.atleast_2d(np.cov(reps - reps[0], rowvar=False))
    covariance = 0.5 * (covariance + covariance.T)
    min_eig = float(np.min(np.linalg.eigvalsh(covariance)))
    if min_eig < -PSD_TOL:
        raise VarianceError(f"Replicate covariance is not PSD (smallest eigenvalue {min_eig:.3g})")

    se = np.sqrt(np.clip(np.diag(covariance), 0.0, None))
    estimate = point_fit.beta[list(columns)]
    lo, hi = wald_ci(estimate, se, rconfig.level)
    logger.info(f"✓ Resampling variance from {B_eff}/{rconfig.B} replicates")
    return VarianceResult(
        names=tuple(dataset.covariate_names[j] for j in columns),
        columns=tuple(columns),
        estimate=estimate,
        refit_estimate=refit.beta_raw,
        se=se,
        covariance=covariance,
        ci_lower=np.atleast_1d(lo),
        ci_upper=np.atleast_1d(hi),
        level=rconfig.level,
        B=rconfig.B,
        B_effective=B_eff,
        unreliable=unreliable,
        note="fewer than 80% of replicates converged" if unreliable else "",
    )
