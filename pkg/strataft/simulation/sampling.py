"""
Event-count stratified sampling of a generated cohort.

Stratum s = 1 + (number of events in the cluster); ⌊n_s p_s⌉ clusters are drawn
without replacement from each stratum and weighted by n_s/ñ_s.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from strataft.data_model import Cluster, ClusteredDataset, Observation, StratumCount
from strataft.exceptions import SamplingError
from strataft.simulation.generators import Cohort

logger = logging.getLogger(__name__)


def event_strata(delta: np.ndarray) -> np.ndarray:
    return 1 + np.asarray(delta, dtype=int).sum(axis=1)


def build_clusters(
    X: np.ndarray,
    y: np.ndarray,
    delta: np.ndarray,
    strata: np.ndarray,
    cluster_ids: Sequence[str],
) -> List[Cluster]:
    """Sampled clusters from dense (n, K, p) / (n, K) arrays."""
    return [
        Cluster(
            id=str(cluster_ids[i]),
            stratum=int(strata[i]),
            sampled=True,
            members=tuple(
                Observation(
                    log_time=float(y[i, k]),
                    event=bool(delta[i, k]),
                    covariates=X[i, k],
                    member_id=str(k + 1),
                )
                for k in range(X.shape[1])
            ),
        )
        for i in range(X.shape[0])
    ]


def sample_sizes(n_s: int, p_s: float) -> int:
    """Rounded count ⌊n_s p_s + 1/2⌋."""
    return int(np.floor(n_s * p_s + 0.5))


def stratify_and_sample(
    cohort: Cohort,
    inclusion_probs: Sequence[float],
    rng: np.random.Generator,
    covariate_names: Optional[Sequence[str]] = None,
) -> ClusteredDataset:
    """
    Stratify clusters by event count and sample within strata.

    A populated stratum whose rounded count is 0 is redrawn once with
    Bernoulli(p_s) inclusion; if that is empty as well the sample fails.

    Args:
        cohort: Generated full cohort (K members per cluster)
        inclusion_probs: One probability per stratum 1..K+1
        rng: Random generator
        covariate_names: Optional covariate names

    Returns:
        ClusteredDataset holding the sampled clusters, with the cohort's
        per-stratum counts in strata_counts

    Raises:
        SamplingError: If inclusion_probs has the wrong length or a stratum
            stays empty after the redraw
    """
    K = cohort.X.shape[1]
    probs = np.asarray(inclusion_probs, dtype=float)
    if probs.shape != (K + 1,):
        raise SamplingError(f"Need {K + 1} inclusion probabilities (one per event count), got {len(probs)}")
    if np.any((probs <= 0) | (probs > 1)):
        raise SamplingError(f"Inclusion probabilities must lie in (0, 1], got {probs.tolist()}")

    delta = cohort.delta
    strata = event_strata(delta)
    chosen: List[np.ndarray] = []
    counts: Dict[int, StratumCount] = {}

    for s in range(1, K + 2):
        members = np.flatnonzero(strata == s)
        n_s = len(members)
        if n_s == 0:
            continue
        p_s = probs[s - 1]
        m_s = sample_sizes(n_s, p_s)
        if m_s == 0:
            m_s = int(rng.binomial(n_s, p_s))
            logger.warning(f"Stratum {s} rounds to 0 sampled of {n_s}; redrawn with Bernoulli → {m_s}")
            if m_s == 0:
                raise SamplingError(f"Stratum {s} has {n_s} clusters but none sampled after redraw")
        chosen.append(rng.choice(members, size=m_s, replace=False))
        counts[s] = StratumCount(stratum=s, cohort_size=n_s, sampled_size=m_s)

    sampled = np.sort(np.concatenate(chosen))
    clusters = build_clusters(
        cohort.X[sampled], cohort.y[sampled], delta[sampled], strata[sampled], [str(i) for i in sampled]
    )
    logger.debug(f"Sampled {len(sampled)} of {cohort.n_clusters} clusters across {len(counts)} strata")
    return ClusteredDataset.from_clusters(
        clusters, p=cohort.X.shape[2], strata_counts=counts, covariate_names=covariate_names
    )
