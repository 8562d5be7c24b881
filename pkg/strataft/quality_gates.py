"""
Quality Gates Module for strataft

Blocking gates (dataset invariants every estimator relies on) and non-blocking
gates (conditions that limit some analyses), run together into a validation
report. Unlike fail-fast startup checks, every gate runs so the report lists
all problems at once.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd

from strataft.data_model import ClusteredDataset
from strataft.exceptions import DataQualityError

logger = logging.getLogger(__name__)

# Weight agreement tolerance (relative)
WEIGHT_RTOL = 1e-9


@dataclass
class ValidationReport:
    passed: bool
    failures: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    gates: Dict[str, str] = field(default_factory=dict)
    design_summary: pd.DataFrame = field(default_factory=pd.DataFrame)

    def render(self) -> str:
        lines = [f"Validation {'PASSED' if self.passed else 'FAILED'}"]
        lines += [f"  {name}: {result}" for name, result in self.gates.items()]
        if self.failures:
            lines.append("Failures:")
            lines += [f"  - {msg}" for msg in self.failures]
        if self.warnings:
            lines.append("Warnings:")
            lines += [f"  - {msg}" for msg in self.warnings]
        if not self.design_summary.empty:
            lines.append("Design summary:")
            lines.append(self.design_summary.to_string(index=False))
        return "\n".join(lines)


def validate_cluster_members(dataset: ClusteredDataset) -> None:
    """
    Every cluster has members; sampled members carry a length-p covariate vector.

    Raises:
        DataQualityError: Listing offending cluster ids - BLOCKING
    """
    problems = []
    for cluster in dataset.clusters:
        if cluster.size == 0:
            problems.append(f"cluster {cluster.id} has no members")
            continue
        if not cluster.sampled:
            continue
        for obs in cluster.members:
            if obs.covariates is None:
                problems.append(f"sampled cluster {cluster.id} member {obs.member_id} is missing covariates")
            elif obs.covariates.shape != (dataset.p,):
                problems.append(
                    f"sampled cluster {cluster.id} member {obs.member_id} has {obs.covariates.size} "
                    f"covariates, expected {dataset.p}"
                )
    if problems:
        raise DataQualityError("BLOCKING: " + "; ".join(problems))
    logger.info("✓ Cluster member dimension validation passed")


def validate_finite_values(dataset: ClusteredDataset) -> None:
    """
    Log-times and sampled covariates are finite.

    Raises:
        DataQualityError: If non-finite values are found - BLOCKING
    """
    problems = []
    for cluster in dataset.clusters:
        for obs in cluster.members:
            if not np.isfinite(obs.log_time):
                problems.append(f"cluster {cluster.id} member {obs.member_id}: non-finite log time")
            if cluster.sampled and obs.covariates is not None and not np.all(np.isfinite(obs.covariates)):
                problems.append(f"cluster {cluster.id} member {obs.member_id}: non-finite covariate")
    if problems:
        raise DataQualityError("BLOCKING: " + "; ".join(problems))
    logger.info("✓ Finite value validation passed")


def validate_weights(dataset: ClusteredDataset) -> None:
    """
    ω > 0 exactly for sampled clusters and each ω equals its stratum's n_s/ñ_s.

    Raises:
        DataQualityError: On weight/sampling inconsistencies - BLOCKING
    """
    problems = []
    weights = np.asarray(dataset.weights)
    for cluster, w in zip(dataset.clusters, weights):
        if cluster.sampled and w <= 0:
            problems.append(f"sampled cluster {cluster.id} has weight {w}")
        if not cluster.sampled and w != 0:
            problems.append(f"unsampled cluster {cluster.id} has nonzero weight {w}")
        if cluster.sampled and w > 0:
            sc = dataset.strata_counts.get(cluster.stratum)
            expected = sc.weight if sc is not None else None
            if expected is not None and not np.isclose(w, expected, rtol=WEIGHT_RTOL, atol=0):
                problems.append(
                    f"cluster {cluster.id} weight {w:.6g} differs from stratum {cluster.stratum} "
                    f"inverse inclusion fraction {expected:.6g}"
                )
    if problems:
        raise DataQualityError("BLOCKING: " + "; ".join(problems))
    logger.info("✓ Weight consistency validation passed")


def validate_strata(dataset: ClusteredDataset) -> None:
    """
    Strata counts agree with the cluster labels and no populated stratum is empty
    of sampled clusters.

    Raises:
        DataQualityError: On empty strata or count mismatches - BLOCKING
    """
    problems = []
    sampled_per_stratum: Dict[int, int] = {}
    for cluster in dataset.clusters:
        if cluster.sampled:
            sampled_per_stratum[cluster.stratum] = sampled_per_stratum.get(cluster.stratum, 0) + 1

    for stratum in sampled_per_stratum:
        if stratum not in dataset.strata_counts:
            problems.append(f"stratum {stratum} has sampled clusters but no design counts")

    for stratum, sc in dataset.strata_counts.items():
        present = sampled_per_stratum.get(stratum, 0)
        if sc.cohort_size is None:
            continue
        if sc.cohort_size > 0 and sc.sampled_size == 0:
            problems.append(f"stratum {stratum} is empty: {sc.cohort_size} cohort clusters, none sampled")
        elif present != sc.sampled_size:
            problems.append(
                f"stratum {stratum} reports {sc.sampled_size} sampled clusters but {present} are present"
            )
    if not sampled_per_stratum:
        problems.append("no sampled clusters")
    if problems:
        raise DataQualityError("BLOCKING: " + "; ".join(problems))
    logger.info("✓ Strata consistency validation passed")


def validate_events(dataset: ClusteredDataset) -> None:
    """
    At least one sampled member has an observed event.

    Raises:
        DataQualityError: If every sampled member is censored - BLOCKING
    """
    if not any(c.n_events for c in dataset.clusters if c.sampled):
        raise DataQualityError("BLOCKING: no observed events among sampled clusters")
    logger.info("✓ Event presence validation passed")


def check_cluster_sizes(dataset: ClusteredDataset) -> List[str]:
    """Ragged clusters rule out exchangeable/unstructured moment estimation - NON-BLOCKING."""
    sizes = sorted({c.size for c in dataset.clusters if c.sampled})
    if len(sizes) > 1:
        msg = f"cluster sizes vary ({sizes}); only working independence is available"
        logger.warning(msg)
        return [msg]
    return []


def check_stratum_sizes(dataset: ClusteredDataset, folds: int = 5) -> List[str]:
    """Strata smaller than the CV fold count get reduced splits - NON-BLOCKING."""
    small = [s for s, sc in dataset.strata_counts.items() if 0 < sc.sampled_size < folds]
    if small:
        msg = f"strata {small} have fewer than {folds} sampled clusters; CV splits will be reduced there"
        logger.warning(msg)
        return [msg]
    return []


def check_censoring(dataset: ClusteredDataset, threshold: float = 0.95) -> List[str]:
    """Very heavy censoring leaves the Kaplan-Meier tail thin - NON-BLOCKING."""
    members = [m for c in dataset.clusters if c.sampled for m in c.members]
    if not members:
        return []
    rate = 1.0 - np.mean([m.event for m in members])
    if rate > threshold:
        msg = f"censoring rate among sampled members is {rate:.1%} (> {threshold:.0%})"
        logger.warning(msg)
        return [msg]
    return []


def design_summary(dataset: ClusteredDataset) -> pd.DataFrame:
    """Per-stratum n_s, ñ_s, ω_s, events and censoring rate of the sampled members."""
    rows = []
    for stratum, sc in sorted(dataset.strata_counts.items()):
        members = [m for c in dataset.clusters if c.sampled and c.stratum == stratum for m in c.members]
        events = int(sum(m.event for m in members))
        rows.append(
            {
                "stratum": stratum,
                "cohort_size": sc.cohort_size,
                "sampled_size": sc.sampled_size if sc.cohort_size is not None else None,
                "inclusion_fraction": sc.inclusion_fraction,
                "weight": sc.weight,
                "members": len(members),
                "events": events,
                "censoring_rate": 1.0 - events / len(members) if members else None,
            }
        )
    return pd.DataFrame(rows)


BLOCKING_GATES = {
    "cluster_members": validate_cluster_members,
    "finite_values": validate_finite_values,
    "weights": validate_weights,
    "strata": validate_strata,
    "events": validate_events,
}


def validate_dataset(dataset: ClusteredDataset, folds: int = 5) -> ValidationReport:
    """
    Run every quality gate and collect a report.

    Returns:
        ValidationReport; passed iff every blocking gate passed
    """
    logger.info("Running dataset validation...")
    report = ValidationReport(passed=True)

    for name, gate in BLOCKING_GATES.items():
        try:
            gate(dataset)
            report.gates[name] = "PASS"
        except DataQualityError as e:
            report.gates[name] = "FAIL"
            report.failures.append(str(e).removeprefix("BLOCKING: "))

    report.warnings += check_cluster_sizes(dataset)
    report.warnings += check_stratum_sizes(dataset, folds)
    report.warnings += check_censoring(dataset)
    report.design_summary = design_summary(dataset)
    report.passed = not report.failures

    if report.passed:
        logger.info("✓ All blocking gates passed")
    else:
        logger.warning(f"{len(report.failures)} blocking gates failed")
    return report


def ensure_valid(dataset: ClusteredDataset, folds: int = 5) -> ValidationReport:
    """
    Validate and raise on blocking failures.

    Raises:
        DataQualityError: If any blocking gate fails
    """
    report = validate_dataset(dataset, folds)
    if not report.passed:
        raise DataQualityError("Dataset failed validation: " + "; ".join(report.failures))
    return report
