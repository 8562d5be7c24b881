"""
Data Model for Clustered Survival Data under Stratified Sampling

Observations, clusters and the dataset container, plus inverse-inclusion
sampling weights. Datasets are immutable after construction; derived datasets
(unweighted, perturbed weights, covariate subsets, CV folds) are new objects.
"""

import dataclasses
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from strataft.exceptions import DataQualityError, DesignError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Observation:
    """One cluster member: log observed time, event indicator and covariates."""

    log_time: float
    event: bool
    covariates: Optional[np.ndarray] = None
    member_id: str = ""

    def __post_init__(self):
        if self.covariates is not None:
            arr = np.asarray(self.covariates, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "covariates", arr)


@dataclass(frozen=True, eq=False)
class Cluster:
    """A cluster with its stratum label and sampling indicator."""

    id: str
    stratum: int
    sampled: bool
    members: Tuple[Observation, ...]

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def n_events(self) -> int:
        return int(sum(bool(m.event) for m in self.members))


@dataclass(frozen=True)
class StratumCount:
    """
    Per-stratum design counts.

    Either the cohort size n_s is known (realized fraction ñ_s/n_s is used), or
    only the design inclusion probability is (ω = 1/inclusion_prob).
    """

    stratum: int
    cohort_size: Optional[int]
    sampled_size: int
    inclusion_prob: Optional[float] = None

    @property
    def inclusion_fraction(self) -> Optional[float]:
        if self.cohort_size is not None:
            if self.cohort_size <= 0:
                return None
            return self.sampled_size / self.cohort_size
        return self.inclusion_prob

    @property
    def weight(self) -> Optional[float]:
        """Sampling weight of a sampled cluster in this stratum."""
        if self.cohort_size is not None:
            if self.sampled_size <= 0:
                return None
            return self.cohort_size / self.sampled_size
        if self.inclusion_prob:
            return 1.0 / self.inclusion_prob
        return None


@dataclass(frozen=True, eq=False)
class DesignArrays:
    """
    Dense padded view of the sampled clusters used by every estimator.

    X has shape (n, K, p), y/delta/mask have shape (n, K); padded member slots
    (ragged clusters) carry mask False and zeros elsewhere.
    """

    X: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    mask: np.ndarray
    weights: np.ndarray
    strata: np.ndarray
    cluster_ids: Tuple[str, ...]

    @property
    def n_clusters(self) -> int:
        return self.X.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def constant_size(self) -> bool:
        return bool(self.mask.all())

    @property
    def cluster_sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass(frozen=True, eq=False)
class ClusteredDataset:
    """
    Clustered right-censored data from a stratified sample.

    `weights` is aligned with `clusters` (0 for unsampled clusters). Clusters
    of the unsampled part of the cohort may be omitted entirely, in which case
    they contribute only through `strata_counts`.
    """

    clusters: Tuple[Cluster, ...]
    p: int
    strata_counts: Mapping[int, StratumCount]
    weights: np.ndarray
    covariate_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        if not self.covariate_names:
            object.__setattr__(
                self, "covariate_names", tuple(f"x{j + 1}" for j in range(self.p))
            )

    @classmethod
    def from_clusters(
        cls,
        clusters: Sequence[Cluster],
        p: int,
        strata_counts: Optional[Mapping[int, StratumCount]] = None,
        covariate_names: Optional[Sequence[str]] = None,
    ) -> "ClusteredDataset":
        """
        Build a dataset and its sampling weights.

        Args:
            clusters: Clusters (sampled and, optionally, unsampled)
            p: Covariate dimension
            strata_counts: Per-stratum design counts; derived from the clusters
                themselves when omitted (full cohort present)
            covariate_names: Column names, defaults to x1..xp

        Returns:
            ClusteredDataset with weights from compute_weights

        Raises:
            DesignError: If counts and sampling flags are inconsistent
        """
        clusters = tuple(clusters)
        if strata_counts is None:
            strata_counts = derive_strata_counts(clusters)
        weights = compute_weights(
            strata_counts,
            [c.stratum for c in clusters],
            [c.sampled for c in clusters],
        )
        return cls(
            clusters=clusters,
            p=p,
            strata_counts=dict(strata_counts),
            weights=weights,
            covariate_names=tuple(covariate_names or ()),
        )

    @property
    def sampled_positions(self) -> np.ndarray:
        return np.array([i for i, c in enumerate(self.clusters) if c.sampled], dtype=int)

    @property
    def n_sampled(self) -> int:
        return int(len(self.sampled_positions))

    @property
    def n_cohort(self) -> int:
        """Cohort cluster count from strata_counts, falling back to clusters present."""
        if self.strata_counts and all(
            sc.cohort_size is not None for sc in self.strata_counts.values()
        ):
            return int(sum(sc.cohort_size for sc in self.strata_counts.values()))
        return len(self.clusters)

    @cached_property
    def arrays(self) -> DesignArrays:
        positions = self.sampled_positions
        sampled = [self.clusters[i] for i in positions]
        n = len(sampled)
        K = max((c.size for c in sampled), default=1)
        X = np.zeros((n, K, self.p))
        y = np.zeros((n, K))
        delta = np.zeros((n, K), dtype=bool)
        mask = np.zeros((n, K), dtype=bool)
        for i, cluster in enumerate(sampled):
            for k, obs in enumerate(cluster.members):
                if obs.covariates is None or obs.covariates.shape != (self.p,):
                    raise DataQualityError(
                        f"Sampled cluster {cluster.id} member {k} lacks a length-{self.p} covariate vector"
                    )
                X[i, k, :] = obs.covariates
                y[i, k] = obs.log_time
                delta[i, k] = bool(obs.event)
                mask[i, k] = True
        return DesignArrays(
            X=X,
            y=y,
            delta=delta,
            mask=mask,
            weights=np.asarray(self.weights, dtype=float)[positions],
            strata=np.array([c.stratum for c in sampled], dtype=int),
            cluster_ids=tuple(c.id for c in sampled),
        )

    def with_weights(self, weights: np.ndarray) -> "ClusteredDataset":
        """Return a copy with a replacement weight vector (aligned with clusters)."""
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(self.clusters),):
            raise DesignError(
                f"Weight vector has shape {weights.shape}, expected ({len(self.clusters)},)"
            )
        return dataclasses.replace(self, weights=weights)

    def unweighted(self) -> "ClusteredDataset":
        """Copy with ω forced to 1 on sampled clusters (the unweighted analysis)."""
        flags = np.array([c.sampled for c in self.clusters], dtype=float)
        return self.with_weights(flags)

    def select_covariates(self, columns: Sequence[int]) -> "ClusteredDataset":
        """Copy keeping only the given covariate columns (in the given order)."""
        columns = [int(j) for j in columns]
        clusters = tuple(
            dataclasses.replace(
                c,
                members=tuple(
                    dataclasses.replace(
                        m,
                        covariates=None if m.covariates is None else m.covariates[columns],
                    )
                    for m in c.members
                ),
            )
            for c in self.clusters
        )
        return dataclasses.replace(
            self,
            clusters=clusters,
            p=len(columns),
            covariate_names=tuple(self.covariate_names[j] for j in columns),
        )

    def subset(self, positions: Iterable[int]) -> "ClusteredDataset":
        """Copy restricted to the clusters at `positions`, keeping their weights."""
        positions = np.asarray(list(positions), dtype=int)
        return dataclasses.replace(
            self,
            clusters=tuple(self.clusters[i] for i in positions),
            weights=np.asarray(self.weights)[positions],
        )


def derive_strata_counts(clusters: Sequence[Cluster]) -> Dict[int, StratumCount]:
    """Per-stratum (n_s, ñ_s) computed from a full-cohort cluster list."""
    counts: Dict[int, List[int]] = {}
    for cluster in clusters:
        entry = counts.setdefault(int(cluster.stratum), [0, 0])
        entry[0] += 1
        entry[1] += int(bool(cluster.sampled))
    return {
        s: StratumCount(stratum=s, cohort_size=n_s, sampled_size=m_s)
        for s, (n_s, m_s) in sorted(counts.items())
    }


def compute_weights(
    strata_counts: Mapping[int, StratumCount],
    cluster_strata: Sequence[int],
    sampled_flags: Sequence[bool],
) -> np.ndarray:
    """
    Inverse-inclusion sampling weights.

    A sampled cluster in stratum s gets ω = n_s/ñ_s (or 1/inclusion_prob when
    only the design probability is known); unsampled clusters get 0.

    Args:
        strata_counts: Mapping stratum -> StratumCount
        cluster_strata: Stratum label per cluster
        sampled_flags: Sampling indicator per cluster

    Returns:
        Weight vector aligned with the clusters

    Raises:
        DesignError: If ñ_s > n_s, a stratum with sampled clusters has ñ_s = 0,
            or a sampled cluster's stratum has no counts
    """
    if len(cluster_strata) != len(sampled_flags):
        raise DesignError(
            f"{len(cluster_strata)} stratum labels but {len(sampled_flags)} sampling flags"
        )

    for sc in strata_counts.values():
        if sc.cohort_size is not None and sc.sampled_size > sc.cohort_size:
            raise DesignError(
                f"Invalid design: stratum {sc.stratum} has {sc.sampled_size} sampled "
                f"clusters but cohort size {sc.cohort_size}"
            )
        if sc.inclusion_prob is not None and not 0 < sc.inclusion_prob <= 1:
            raise DesignError(
                f"Invalid design: stratum {sc.stratum} inclusion probability "
                f"{sc.inclusion_prob} outside (0, 1]"
            )

    weights = np.zeros(len(cluster_strata))
    for i, (stratum, sampled) in enumerate(zip(cluster_strata, sampled_flags)):
        if not sampled:
            continue
        sc = strata_counts.get(int(stratum))
        if sc is None:
            raise DesignError(f"Sampled cluster {i} is in stratum {stratum} with no design counts")
        if sc.cohort_size is not None and sc.sampled_size == 0:
            raise DesignError(
                f"Inconsistent design: stratum {stratum} contains a sampled cluster "
                f"but reports 0 sampled clusters"
            )
        weight = sc.weight
        if weight is None or weight <= 0:
            raise DesignError(f"Stratum {stratum} has no usable inclusion fraction")
        weights[i] = weight

    logger.debug(f"Computed weights for {int(np.count_nonzero(sampled_flags))} sampled clusters")
    return weights
