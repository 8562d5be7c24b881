"""
Stratified Cross-Validation for the Tuning Parameter

Folds are built per stratum and merged by fold index, so every fold keeps the
stratum mix of the full sample. The prediction error of a held-out member uses
the holdout fold's own unpenalized fit for imputation:

    PE_ij(λ) = {Ŷ_ij,ω(β̂_holdout) - X_ij β̂_train(λ)}²

μ_ω(λ) is the ω-weighted mean over all held-out members; λ_cv minimizes it and
λ_1se is the largest λ within one standard error of that minimum.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import optimize
from sklearn.model_selection import KFold

from strataft.data_model import ClusteredDataset
from strataft.exceptions import ConfigError, EstimationError, TuningError
from strataft.pgee_solver import (
    PenaltySpec,
    SolverConfig,
    fit,
    wols_initial,
)
from strataft.weighted_km import impute_at
from strataft.working_correlation import CorrelationKind

logger = logging.getLogger(__name__)

DEFAULT_FOLDS = 5
DEFAULT_N_LAMBDA = 50
DEFAULT_LAMBDA_MIN_RATIO = 1e-3

# Relative tolerance for ties when comparing μ values
TIE_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class CvPlan:
    """
    Fold assignment for the sampled clusters.

    `fold_assignment[i]` is the fold of the i-th sampled cluster and
    `positions[i]` its index in `dataset.clusters`.
    """

    M: int
    fold_assignment: np.ndarray
    positions: np.ndarray
    seed: int

    def holdout_positions(self, m: int) -> np.ndarray:
        return self.positions[self.fold_assignment == m]

    def training_positions(self, m: int) -> np.ndarray:
        return self.positions[self.fold_assignment != m]


@dataclass(frozen=True, eq=False)
class FoldError:
    """Per-member prediction errors of one holdout fold with the sums μ and SE need."""

    pe: np.ndarray
    weighted_sum: float
    weighted_sq_sum: float
    weight_total: float
    cluster_weight_total: float
    n_clusters: int


@dataclass(frozen=True, eq=False)
class CvCurve:
    """Cross-validation curve over a descending λ grid and the selected values."""

    lambdas: np.ndarray
    mu: np.ndarray
    se: np.ndarray
    n_valid_folds: np.ndarray
    se_at_cvmin: float
    lambda_cv: float
    lambda_1se: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "lambda": self.lambdas,
                "mu": self.mu,
                "se": self.se,
                "n_valid_folds": self.n_valid_folds.astype(int),
            }
        )

    def selected(self, rule: str) -> float:
        if rule == "cv":
            return self.lambda_cv
        if rule == "1se":
            return self.lambda_1se
        raise ConfigError(f"Unknown selection rule {rule!r}; expected 'cv' or '1se'")


def make_folds(dataset: ClusteredDataset, M: int, seed: int) -> CvPlan:
    """
    Stratified cluster-level fold assignment.

    Each stratum's sampled clusters are shuffled and split into M near-equal
    parts; the m-th parts across strata form fold m. A stratum with fewer than
    M clusters is split into as many folds as it has clusters, placed at
    rotating offsets modulo M.

    Raises:
        ConfigError: If M < 2
    """
    if M < 2:
        raise ConfigError(f"Cross-validation needs at least 2 folds, got M = {M}")

    arrays = dataset.arrays
    positions = dataset.sampled_positions
    assignment = np.full(arrays.n_clusters, -1, dtype=int)
    rng = np.random.default_rng(seed)
    offset = 0

    for stratum in np.unique(arrays.strata):
        members = np.flatnonzero(arrays.strata == stratum)
        n_s = len(members)
        random_state = int(rng.integers(np.iinfo(np.int32).max))
        if n_s >= M:
            splitter = KFold(n_splits=M, shuffle=True, random_state=random_state)
            for m, (_, test_idx) in enumerate(splitter.split(members)):
                assignment[members[test_idx]] = m
            continue

        logger.warning(
            f"Stratum {stratum} has {n_s} sampled clusters < M = {M}; using {n_s} folds for it"
        )
        if n_s == 1:
            assignment[members] = offset % M
        else:
            splitter = KFold(n_splits=n_s, shuffle=True, random_state=random_state)
            for m, (_, test_idx) in enumerate(splitter.split(members)):
                assignment[members[test_idx]] = (m + offset) % M
        offset += n_s

    return CvPlan(M=M, fold_assignment=assignment, positions=positions, seed=seed)


def prediction_error(
    holdout: ClusteredDataset,
    beta_train: np.ndarray,
    beta_holdout_unpen: np.ndarray,
) -> FoldError:
    """
    Prediction errors on a holdout fold.

    Ŷ is imputed from the holdout fold's own weighted Kaplan-Meier at its
    unpenalized estimate; padded member slots carry PE = 0.
    """
    arrays = holdout.arrays
    imputed, _ = impute_at(holdout, beta_holdout_unpen)
    fitted = np.einsum("ikp,p->ik", arrays.X, np.asarray(beta_train, dtype=float))
    pe = np.where(arrays.mask, (imputed.values - fitted) ** 2, 0.0)
    w = arrays.weights
    return FoldError(
        pe=pe,
        weighted_sum=float(np.sum(w[:, None] * pe)),
        weighted_sq_sum=float(np.sum(w[:, None] * pe ** 2)),
        weight_total=float(np.sum(w * arrays.cluster_sizes)),
        cluster_weight_total=float(np.sum(w)),
        n_clusters=arrays.n_clusters,
    )


def _start(dataset: ClusteredDataset) -> np.ndarray:
    return wols_initial(dataset, ridge=True)


def _fold_task(
    m: int,
    dataset: ClusteredDataset,
    plan: CvPlan,
    lambdas: np.ndarray,
    spec: PenaltySpec,
    config: SolverConfig,
    structure: CorrelationKind,
) -> Dict[str, np.ndarray]:
    """Fit the λ path on the training folds and score the holdout fold m."""
    L = len(lambdas)
    out = {
        "valid": np.zeros(L, dtype=bool),
        "s1": np.zeros(L),
        "s2": np.zeros(L),
        "sw": 0.0,
        "sw_cluster": 0.0,
        "n": 0,
    }
    holdout = dataset.subset(plan.holdout_positions(m))
    training = dataset.subset(plan.training_positions(m))

    try:
        hold_fit = fit(holdout, PenaltySpec.unpenalized(), config, structure, _start(holdout))
    except EstimationError as e:
        logger.warning(f"Fold {m}: holdout unpenalized fit failed ({e}); fold invalid for every λ")
        return out
    if not hold_fit.converged:
        logger.warning(f"Fold {m}: holdout unpenalized fit did not converge; fold invalid for every λ")
        return out

    b = None
    for j, lam in enumerate(lambdas):
        try:
            b_start = _start(training) if b is None else b
            train_fit = fit(training, spec.with_lambda(lam), config, structure, b_start)
        except EstimationError as e:
            logger.debug(f"Fold {m}, λ = {lam:.4g}: training fit failed ({e})")
            continue
        if not train_fit.converged:
            logger.debug(f"Fold {m}, λ = {lam:.4g}: training fit did not converge")
            continue
        b = train_fit.beta_raw
        err = prediction_error(holdout, train_fit.beta, hold_fit.beta_raw)
        out["valid"][j] = True
        out["s1"][j] = err.weighted_sum
        out["s2"][j] = err.weighted_sq_sum
        out["sw"] = err.weight_total
        out["sw_cluster"] = err.cluster_weight_total
        out["n"] = err.n_clusters
    return out


def cv_curve(
    dataset: ClusteredDataset,
    plan: CvPlan,
    lambda_grid: Sequence[float],
    spec: PenaltySpec,
    config: SolverConfig,
    structure: Union[str, CorrelationKind],
    workers: int = 1,
) -> CvCurve:
    """
    Cross-validation curve μ_ω(λ) and the CV-min / one-standard-error choices.

    Along the descending grid each training fit warm-starts from the previous
    λ's solution. λ values where no fold is valid are dropped from selection.

    Args:
        dataset: Full dataset
        plan: Fold assignment from make_folds
        lambda_grid: Grid of λ values (sorted descending here)
        spec: Penalty template (family, a, exemptions)
        config: Solver configuration
        structure: Working correlation kind
        workers: Worker processes over folds

    Returns:
        CvCurve

    Raises:
        TuningError: If the grid is empty or every λ lost all folds
    """
    lambdas = np.sort(np.asarray(lambda_grid, dtype=float))[::-1]
    if lambdas.size == 0:
        raise TuningError("λ grid is empty")
    kind = CorrelationKind.parse(structure)
    task = partial(
        _fold_task, dataset=dataset, plan=plan, lambdas=lambdas, spec=spec, config=config, structure=kind
    )

    folds = range(plan.M)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results: List[Dict] = list(executor.map(task, folds))
    else:
        results = [task(m) for m in folds]

    valid = np.array([r["valid"] for r in results])
    s1 = np.array([r["s1"] for r in results])
    s2 = np.array([r["s2"] for r in results])
    sw = np.array([r["sw"] for r in results])[:, None] * valid
    sw_cluster = np.array([r["sw_cluster"] for r in results])[:, None] * valid
    n_used = np.array([r["n"] for r in results])[:, None] * valid

    n_valid = valid.sum(axis=0)
    S1, S2, SW = s1.sum(axis=0), s2.sum(axis=0), sw.sum(axis=0)
    SWc, N = sw_cluster.sum(axis=0), n_used.sum(axis=0)

    usable = (n_valid > 0) & (SW > 0)
    for lam in lambdas[~usable]:
        logger.warning(f"λ = {lam:.4g} has no valid folds; dropped from selection")
    if not np.any(usable):
        raise TuningError("Every λ on the grid lost all of its folds")

    mu = np.full(len(lambdas), np.nan)
    se = np.full(len(lambdas), np.nan)
    mu[usable] = S1[usable] / SW[usable]
    spread = S2 - 2 * mu * S1 + mu ** 2 * SW
    denom = SWc * (N - 1)
    ok = usable & (denom > 0)
    se[ok] = np.sqrt(np.maximum(spread[ok], 0.0) / denom[ok])

    mu_min = np.nanmin(mu)
    tol = TIE_RTOL * max(abs(mu_min), 1.0)
    # descending grid: the first index meeting a condition is the largest λ
    i_cv = int(np.flatnonzero(usable & (mu <= mu_min + tol))[0])
    se_cv = float(se[i_cv]) if np.isfinite(se[i_cv]) else 0.0
    i_1se = int(np.flatnonzero(usable & (mu <= mu[i_cv] + se_cv + tol))[0])

    logger.info(
        f"✓ Cross-validation over {len(lambdas)} λ values: "
        f"λ_cv = {lambdas[i_cv]:.4g}, λ_1se = {lambdas[i_1se]:.4g}"
    )
    return CvCurve(
        lambdas=lambdas,
        mu=mu,
        se=se,
        n_valid_folds=n_valid,
        se_at_cvmin=se_cv,
        lambda_cv=float(lambdas[i_cv]),
        lambda_1se=float(lambdas[i_1se]),
    )


def _zeroes_all(
    lam: float,
    dataset: ClusteredDataset,
    spec: PenaltySpec,
    config: SolverConfig,
    structure: CorrelationKind,
    initial_b: np.ndarray,
) -> bool:
    try:
        result = fit(dataset, spec.with_lambda(lam), config, structure, initial_b)
    except EstimationError as e:
        logger.debug(f"λ = {lam:.4g}: fit failed during λ_max search ({e})")
        return False
    penalized = ~spec.exempt(dataset.p)
    return bool(np.all(result.beta[penalized] == 0.0))


def lambda_max(
    dataset: ClusteredDataset,
    spec: PenaltySpec,
    config: SolverConfig,
    structure: Union[str, CorrelationKind],
    initial_b: Optional[np.ndarray] = None,
    max_doublings: int = 40,
    log_xtol: float = 0.01,
) -> float:
    """
    Smallest λ (to a relative tolerance of about 1%) zeroing every non-exempt
    coefficient on the full data, by bisection on log λ.

    Raises:
        TuningError: If no λ up to the doubling limit zeroes the coefficients
    """
    kind = CorrelationKind.parse(structure)
    b0 = _start(dataset) if initial_b is None else np.asarray(initial_b, dtype=float)
    zeroes = partial(_zeroes_all, dataset=dataset, spec=spec, config=config, structure=kind, initial_b=b0)

    hi = max(float(np.max(np.abs(b0))) if b0.size else 1.0, 1e-3)
    for _ in range(max_doublings):
        if zeroes(hi):
            break
        hi *= 2.0
    else:
        raise TuningError(f"No λ up to {hi:.4g} zeroes every penalized coefficient")

    lo = hi / 2.0
    for _ in range(max_doublings):
        if not zeroes(lo):
            break
        hi, lo = lo, lo / 2.0
    else:
        logger.warning(f"Every λ down to {lo:.4g} zeroes the penalized coefficients")
        return hi

    t = optimize.bisect(
        lambda log_lam: 1.0 if zeroes(float(np.exp(log_lam))) else -1.0,
        np.log(lo),
        np.log(hi),
        xtol=log_xtol,
    )
    lam = float(np.exp(t))
    if not zeroes(lam):
        lam = float(np.exp(t + log_xtol))
    logger.info(f"✓ λ_max = {lam:.4g}")
    return lam


def default_lambda_grid(
    lam_max: float,
    n_lambda: int = DEFAULT_N_LAMBDA,
    min_ratio: float = DEFAULT_LAMBDA_MIN_RATIO,
) -> np.ndarray:
    """Descending log-spaced grid from λ_max down to λ_max · min_ratio."""
    if n_lambda < 1 or not 0 < min_ratio < 1 or lam_max <= 0:
        raise ConfigError(
            f"Invalid λ grid: lam_max = {lam_max}, n_lambda = {n_lambda}, min_ratio = {min_ratio}"
        )
    if n_lambda == 1:
        return np.array([float(lam_max)])
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambda)
