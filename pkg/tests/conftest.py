"""Shared fixtures for the strataft test suite."""

import os
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from strataft.data_model import Cluster, ClusteredDataset, Observation
from strataft.simulation.generators import generate_cohort
from strataft.simulation.sampling import stratify_and_sample

REPO_ROOT = Path(__file__).resolve().parents[1]


def pytest_collection_modifyitems(config, items):
    if os.getenv("STRATAFT_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set STRATAFT_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def build_dataset(X, y, delta, weights=None, strata=None, names=None) -> ClusteredDataset:
    """Dataset of sampled clusters from dense (n, K, p) / (n, K) arrays."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=bool)
    n, K, p = X.shape
    strata = np.ones(n, dtype=int) if strata is None else np.asarray(strata, dtype=int)
    clusters = [
        Cluster(
            id=f"c{i}",
            stratum=int(strata[i]),
            sampled=True,
            members=tuple(
                Observation(log_time=float(y[i, k]), event=bool(delta[i, k]), covariates=X[i, k], member_id=str(k))
                for k in range(K)
            ),
        )
        for i in range(n)
    ]
    dataset = ClusteredDataset.from_clusters(clusters, p=p, covariate_names=names)
    if weights is not None:
        dataset = dataset.with_weights(np.asarray(weights, dtype=float))
    return dataset


@pytest.fixture
def make_dataset():
    return build_dataset


@pytest.fixture
def beta_sparse():
    return np.array([1.0, 0.0, 0.0, -1.0, 0.0, 0.0])


@pytest.fixture
def sim_dataset(beta_sparse):
    """A stratified sample from a moderately censored clustered cohort (K = 3, p = 6)."""
    rng = np.random.default_rng(123)
    cohort = generate_cohort(300, 3, beta_sparse, 0.3, "normal", float(np.exp(2.5)), rng)
    return stratify_and_sample(cohort, (0.5, 0.6, 0.8, 1.0), rng)


@pytest.fixture
def uncensored_arrays():
    """Uncensored clustered data (n = 40, K = 2, p = 3) with a known linear signal."""
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 2, 3))
    beta = np.array([0.8, -0.5, 0.3])
    y = X @ beta + 0.3 * rng.normal(size=(40, 2))
    delta = np.ones((40, 2), dtype=bool)
    return X, y, delta


def position_lstsq(X, y, weights=None):
    """Weighted least squares of y on X with one intercept per member position."""
    n, K, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    dummies = np.tile(np.eye(K), (n, 1))
    D = np.hstack([X.reshape(n * K, p), dummies])
    sw = np.sqrt(np.repeat(w, K))
    coef, *_ = np.linalg.lstsq(D * sw[:, None], y.reshape(-1) * sw, rcond=None)
    return coef[:p]


@pytest.fixture
def lstsq_reference():
    return position_lstsq


def dataset_csv(path: Path, X, y, delta, strata=None, sampled=None) -> Path:
    """Write dense arrays in the member-level CSV schema (times on the natural scale)."""
    n, K, p = X.shape
    rows = []
    for i in range(n):
        for k in range(K):
            row = {
                "cluster_id": f"c{i}",
                "member_id": f"m{k}",
                "time": float(np.exp(y[i, k])),
                "status": int(delta[i, k]),
                "stratum": 1 if strata is None else int(strata[i]),
            }
            if sampled is not None:
                row["sampled"] = int(sampled[i])
            row.update({f"x{j + 1}": float(X[i, k, j]) for j in range(p)})
            rows.append(row)
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


@pytest.fixture
def write_csv():
    return dataset_csv
