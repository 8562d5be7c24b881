"""
Monte Carlo Study Driver

Each replication generates a cohort, censors it at the calibrated κ, draws the
event-count stratified sample and fits every requested method on it. Methods
sharing (weighting, working structure, penalty family) share one λ path and one
cross-validation curve; the rule (cv, 1se) picks λ from it, and the oracle rule
fits the unpenalized model on the true support.

Replication r draws from np.random.default_rng([seed, 1 + r]); calibration uses
[seed, 0], so results do not depend on worker count or on failures elsewhere.
"""

import logging
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import partial
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from strataft.data_model import ClusteredDataset
from strataft.exceptions import (
    CalibrationError,
    ConfigError,
    SimulationAbortError,
    StratAftError,
)
from strataft.pgee_solver import FitResult, PenaltyFamily, PenaltySpec, SolverConfig, fit, wols_initial
from strataft.simulation.generators import ErrorMarginal, calibrate_censoring, generate_cohort
from strataft.simulation.metrics import (
    ReplicationRecord,
    model_error,
    summarize_estimation,
    summarize_selection,
)
from strataft.simulation.sampling import stratify_and_sample
from strataft.tuning import cv_curve, default_lambda_grid, lambda_max, make_folds
from strataft.variance import MultiplierLaw, ResampleConfig, resample_variance
from strataft.working_correlation import CorrelationKind

logger = logging.getLogger(__name__)

# Share of failed replications that aborts the study
MAX_FAILURE_SHARE = 0.05

RULES = ("cv", "1se", "oracle")

_SEED_BOUND = 2**31 - 1


def default_beta_true(p: int = 18) -> Tuple[float, ...]:
    """Five nonzero effects at positions 1, 4, 7, 10, 13 (1-based), zeros elsewhere."""
    beta = np.zeros(p)
    for pos, value in zip((0, 3, 6, 9, 12), (0.35, 0.6, -0.8, 0.6, -0.8)):
        if pos < p:
            beta[pos] = value
    return tuple(float(b) for b in beta)


@dataclass(frozen=True)
class SimulationScenario:
    """Data-generating configuration and study budget."""

    name: str = "default"
    n_cohort: int = 3000
    K: int = 3
    p: int = 18
    beta_true: Optional[Tuple[float, ...]] = None
    marginal: ErrorMarginal = ErrorMarginal.NORMAL
    tau: float = 0.6
    censoring: float = 0.8
    inclusion_probs: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.6)
    replications: int = 200
    seed: int = 0
    calibration_size: int = 100_000
    calibration_tol: float = 0.005
    folds: int = 5
    n_lambda: int = 20
    lambda_min_ratio: float = 1e-3
    variance_replicates: int = 100
    level: float = 0.95
    target_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "marginal", ErrorMarginal.parse(self.marginal))
        if self.beta_true is None:
            object.__setattr__(self, "beta_true", default_beta_true(self.p))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        object.__setattr__(self, "inclusion_probs", tuple(float(x) for x in self.inclusion_probs))

        problems = []
        if len(self.beta_true) != self.p:
            problems.append(f"beta_true has length {len(self.beta_true)}, expected p = {self.p}")
        if len(self.inclusion_probs) != self.K + 1:
            problems.append(f"inclusion_probs needs K + 1 = {self.K + 1} entries")
        if any(not 0 < x <= 1 for x in self.inclusion_probs):
            problems.append("inclusion_probs must lie in (0, 1]")
        if not 0 <= self.tau < 1:
            problems.append(f"tau must lie in [0, 1), got {self.tau}")
        if not 0 < self.censoring < 1:
            problems.append(f"censoring must lie in (0, 1), got {self.censoring}")
        if self.n_cohort < 2 or self.K < 1 or self.p < 1 or self.replications < 1:
            problems.append("n_cohort ≥ 2, K ≥ 1, p ≥ 1 and replications ≥ 1 are required")
        if not 0 <= self.target_index < self.p:
            problems.append(f"target_index {self.target_index} outside 0..{self.p - 1}")
        if problems:
            raise ConfigError(f"Invalid scenario {self.name!r}: " + "; ".join(problems))

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "SimulationScenario":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"Unknown scenario keys: {sorted(unknown)}")
        return cls(**dict(values))

    @property
    def beta(self) -> np.ndarray:
        return np.array(self.beta_true)

    @property
    def support(self) -> Tuple[int, ...]:
        return tuple(int(j) for j in np.flatnonzero(self.beta))


@dataclass(frozen=True)
class MethodSpec:
    """One analysis method: weighting, working structure, penalty family and λ rule."""

    weighted: bool = True
    structure: CorrelationKind = CorrelationKind.EXCHANGEABLE
    rule: str = "cv"
    family: PenaltyFamily = PenaltyFamily.SCAD

    def __post_init__(self):
        object.__setattr__(self, "structure", CorrelationKind.parse(self.structure))
        object.__setattr__(self, "family", PenaltyFamily(self.family))
        if self.rule not in RULES:
            raise ConfigError(f"Unknown rule {self.rule!r}; expected one of {RULES}")
        if self.rule != "oracle" and self.family == PenaltyFamily.NONE:
            raise ConfigError("Rules cv/1se need a penalty family")

    @property
    def label(self) -> str:
        abbrev = {"independence": "WI", "exchangeable": "EX", "unstructured": "UN"}[self.structure.value]
        weighting = "weighted" if self.weighted else "unweighted"
        body = "oracle" if self.rule == "oracle" else f"{self.family.value}-{self.rule}"
        return f"{weighting}-{abbrev}-{body}"

    @property
    def group(self) -> Tuple[bool, CorrelationKind, PenaltyFamily]:
        return self.weighted, self.structure, self.family


def default_methods(structure: str = "exchangeable") -> List[MethodSpec]:
    return [
        MethodSpec(weighted=w, structure=structure, rule=rule)
        for w in (True, False)
        for rule in RULES
    ]


@dataclass(frozen=True, eq=False)
class StudyResult:
    scenario: SimulationScenario
    kappa: float
    selection: pd.DataFrame
    estimation: pd.DataFrame
    raw: pd.DataFrame
    failures: Tuple[str, ...] = field(default=())
    mean_sampled: float = float("nan")
    mean_censoring: float = float("nan")


def _target_se(
    data: ClusteredDataset,
    point: FitResult,
    target_col: int,
    scenario: SimulationScenario,
    solver: SolverConfig,
    structure: CorrelationKind,
    rng: np.random.Generator,
) -> Tuple[float, float, float]:
    seed = int(rng.integers(_SEED_BOUND))
    if scenario.variance_replicates < 2 or not point.converged or point.beta[target_col] == 0:
        return float("nan"), float("nan"), float("nan")
    rconfig = ResampleConfig(
        B=scenario.variance_replicates, law=MultiplierLaw.EXPONENTIAL, seed=seed, level=scenario.level
    )
    result = resample_variance(data, point, rconfig, solver, structure)
    j = result.columns.index(target_col)
    return float(result.se[j]), float(result.ci_lower[j]), float(result.ci_upper[j])


def _record(
    r: int,
    method: MethodSpec,
    beta_full: np.ndarray,
    point: FitResult,
    lam: float,
    design: ClusteredDataset,
    scenario: SimulationScenario,
    se_ci: Tuple[float, float, float],
) -> ReplicationRecord:
    arrays = design.arrays
    return ReplicationRecord(
        replication=r,
        method=method.label,
        beta_hat=beta_full,
        model_error=model_error(beta_full, scenario.beta, arrays.X, arrays.mask),
        outer_iters=point.outer_iters,
        converged=point.converged,
        lam=lam,
        se_target=se_ci[0],
        ci_lower=se_ci[1],
        ci_upper=se_ci[2],
    )


def run_replication(
    r: int,
    scenario: SimulationScenario,
    methods: Sequence[MethodSpec],
    kappa: float,
    solver: SolverConfig,
    with_variance: bool = True,
) -> Dict[str, Any]:
    """Fit every method on replication r; returns records or the failure message."""
    rng = np.random.default_rng([scenario.seed, 1 + r])
    target = scenario.target_index
    try:
        cohort = generate_cohort(
            scenario.n_cohort, scenario.K, scenario.beta, scenario.tau, scenario.marginal, kappa, rng
        )
        dataset = stratify_and_sample(cohort, scenario.inclusion_probs, rng)

        groups: "OrderedDict[tuple, List[MethodSpec]]" = OrderedDict()
        for method in methods:
            groups.setdefault(method.group, []).append(method)

        records: List[ReplicationRecord] = []
        for (weighted, structure, family), members in groups.items():
            data = dataset if weighted else dataset.unweighted()
            b0 = wols_initial(data, ridge=True)
            spec = PenaltySpec(family=family, lam=0.0)
            curve = None
            if any(m.rule != "oracle" for m in members):
                lam_max = lambda_max(data, spec, solver, structure, b0)
                grid = default_lambda_grid(lam_max, scenario.n_lambda, scenario.lambda_min_ratio)
                plan = make_folds(data, scenario.folds, seed=int(rng.integers(_SEED_BOUND)))
                curve = cv_curve(data, plan, grid, spec, solver, structure)

            for method in members:
                if method.rule == "oracle":
                    support = list(scenario.support)
                    sub = data.select_covariates(support)
                    point = fit(sub, PenaltySpec.unpenalized(), solver, structure, wols_initial(sub, ridge=True))
                    beta_full = np.zeros(scenario.p)
                    beta_full[support] = point.beta
                    lam, var_data = 0.0, sub
                    target_col = support.index(target) if target in support else None
                else:
                    lam = curve.selected(method.rule)
                    point = fit(data, spec.with_lambda(lam), solver, structure, b0)
                    beta_full, var_data, target_col = point.beta, data, target

                se_ci = (float("nan"),) * 3
                if with_variance and target_col is not None:
                    se_ci = _target_se(var_data, point, target_col, scenario, solver, structure, rng)
                records.append(_record(r, method, beta_full, point, lam, dataset, scenario, se_ci))

        return {
            "replication": r,
            "records": records,
            "n_sampled": dataset.n_sampled,
            "censoring": cohort.censoring_rate,
            "error": None,
        }
    except (StratAftError, np.linalg.LinAlgError, FloatingPointError, ValueError) as e:
        e.add_note(f"replication {r}")
        logger.warning(f"Replication {r} failed: {e}")
        return {"replication": r, "records": [], "error": f"replication {r}: {type(e).__name__}: {e}"}


def _raw_frame(records: Sequence[ReplicationRecord], p: int) -> pd.DataFrame:
    rows = []
    for rec in records:
        row = {
            "replication": rec.replication,
            "method": rec.method,
            "lambda": rec.lam,
            "model_error": rec.model_error,
            "outer_iters": rec.outer_iters,
            "converged": rec.converged,
            "se_target": rec.se_target,
            "ci_lower": rec.ci_lower,
            "ci_upper": rec.ci_upper,
        }
        row.update({f"beta_{j + 1}": float(rec.beta_hat[j]) for j in range(p)})
        rows.append(row)
    return pd.DataFrame(rows)


def run_study(
    scenario: SimulationScenario,
    methods: Optional[Sequence[MethodSpec]] = None,
    solver: Optional[SolverConfig] = None,
    workers: int = 1,
    progress: bool = False,
    with_variance: bool = True,
) -> StudyResult:
    """
    Run the Monte Carlo study and summarize each method.

    Returns:
        StudyResult with per-method selection and estimation tables and the
        per-replication raw log

    Raises:
        CalibrationError: If κ cannot be calibrated
        SimulationAbortError: If more than 5% of replications fail
    """
    methods = list(methods or default_methods())
    solver = solver or SolverConfig()
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"Duplicate methods: {labels}")

    calibration_rng = np.random.default_rng([scenario.seed, 0])
    try:
        kappa = calibrate_censoring(
            scenario.n_cohort,
            scenario.K,
            scenario.beta,
            scenario.tau,
            scenario.marginal,
            scenario.censoring,
            calibration_rng,
            calibration_size=scenario.calibration_size,
            tol=scenario.calibration_tol,
        )
    except CalibrationError as e:
        e.add_note(f"scenario {scenario.name}")
        raise

    task = partial(
        run_replication,
        scenario=scenario,
        methods=methods,
        kappa=kappa,
        solver=solver,
        with_variance=with_variance,
    )
    reps = range(scenario.replications)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            outcomes = list(
                tqdm(executor.map(task, reps), total=scenario.replications, desc=scenario.name, disable=not progress)
            )
    else:
        outcomes = [task(r) for r in tqdm(reps, desc=scenario.name, disable=not progress)]

    failures = tuple(o["error"] for o in outcomes if o["error"])
    if len(failures) > MAX_FAILURE_SHARE * scenario.replications:
        raise SimulationAbortError(
            f"{len(failures)} of {scenario.replications} replications failed "
            f"(limit {MAX_FAILURE_SHARE:.0%}); first failures: {list(failures[:3])}"
        )
    if failures:
        logger.warning(f"{len(failures)} replications failed and were excluded")

    ok = [o for o in outcomes if not o["error"]]
    records = [rec for o in ok for rec in o["records"]]
    selection_rows, estimation_rows = [], []
    for method in methods:
        mine = [rec for rec in records if rec.method == method.label]
        meta = {
            "method": method.label,
            "weighted": method.weighted,
            "structure": method.structure.value,
            "rule": method.rule,
            "replications": len(mine),
        }
        selection_rows.append({**meta, **summarize_selection(mine, scenario.beta).as_dict()})
        estimation_rows.append(
            {**meta, **summarize_estimation(mine, scenario.beta, scenario.target_index).as_dict()}
        )

    logger.info(f"✓ Study {scenario.name}: {len(ok)} replications, {len(methods)} methods")
    return StudyResult(
        scenario=scenario,
        kappa=kappa,
        selection=pd.DataFrame(selection_rows),
        estimation=pd.DataFrame(estimation_rows),
        raw=_raw_frame(records, scenario.p),
        failures=failures,
        mean_sampled=float(np.mean([o["n_sampled"] for o in ok])) if ok else float("nan"),
        mean_censoring=float(np.mean([o["censoring"] for o in ok])) if ok else float("nan"),
    )
