"""Tests for the dataset container and sampling weights."""

import numpy as np
import pytest

from strataft.data_model import (
    Cluster,
    ClusteredDataset,
    Observation,
    StratumCount,
    compute_weights,
    derive_strata_counts,
)
from strataft.exceptions import DataQualityError, DesignError


def _cluster(cid, stratum, sampled, n_members=2, p=2, covariates=True):
    return Cluster(
        id=cid,
        stratum=stratum,
        sampled=sampled,
        members=tuple(
            Observation(log_time=0.1 * k, event=k % 2 == 0, covariates=np.ones(p) if covariates else None)
            for k in range(n_members)
        ),
    )


class TestWeights:
    def test_realized_fractions_give_reported_weights(self):
        counts = {
            1: StratumCount(1, 1500, 150),
            2: StratumCount(2, 612, 120),
            3: StratumCount(3, 330, 100),
            4: StratumCount(4, 160, 100),
        }
        w = compute_weights(counts, [1, 2, 3, 4], [True] * 4)
        np.testing.assert_allclose(w, [10.0, 5.1, 3.3, 1.6])

    def test_unsampled_clusters_get_zero(self):
        counts = {1: StratumCount(1, 4, 2)}
        w = compute_weights(counts, [1, 1, 1, 1], [True, False, True, False])
        np.testing.assert_array_equal(w, [2.0, 0.0, 2.0, 0.0])

    def test_inclusion_probability_weights(self):
        counts = {1: StratumCount(1, None, 0, inclusion_prob=0.8529), 2: StratumCount(2, None, 0, inclusion_prob=0.1142)}
        w = compute_weights(counts, [1, 2], [True, True])
        np.testing.assert_allclose(w, [1 / 0.8529, 1 / 0.1142])

    def test_more_sampled_than_cohort_is_rejected(self):
        with pytest.raises(DesignError, match="stratum 1"):
            compute_weights({1: StratumCount(1, 3, 5)}, [1], [True])

    def test_sampled_cluster_in_empty_stratum_is_rejected(self):
        with pytest.raises(DesignError, match="reports 0 sampled"):
            compute_weights({1: StratumCount(1, 10, 0)}, [1], [True])

    def test_missing_stratum_counts_are_rejected(self):
        with pytest.raises(DesignError, match="no design counts"):
            compute_weights({1: StratumCount(1, 10, 2)}, [2], [True])

    def test_full_cohort_has_unit_weights(self):
        clusters = [_cluster(f"c{i}", 1 + i % 2, True) for i in range(6)]
        dataset = ClusteredDataset.from_clusters(clusters, p=2)
        np.testing.assert_array_equal(dataset.weights, np.ones(6))
        assert dataset.n_cohort == 6


class TestDerivedCounts:
    def test_counts_from_flags(self):
        clusters = [_cluster("a", 1, True), _cluster("b", 1, False), _cluster("c", 2, True)]
        counts = derive_strata_counts(clusters)
        assert counts[1] == StratumCount(1, 2, 1)
        assert counts[2] == StratumCount(2, 1, 1)
        assert counts[1].weight == 2.0
        assert counts[1].inclusion_fraction == 0.5


class TestArrays:
    def test_ragged_clusters_are_padded(self):
        clusters = [_cluster("a", 1, True, n_members=3), _cluster("b", 1, True, n_members=1)]
        arrays = ClusteredDataset.from_clusters(clusters, p=2).arrays
        assert arrays.X.shape == (2, 3, 2)
        np.testing.assert_array_equal(arrays.mask, [[True, True, True], [True, False, False]])
        np.testing.assert_array_equal(arrays.cluster_sizes, [3, 1])
        assert not arrays.constant_size
        assert arrays.X[1, 1:].sum() == 0

    def test_unsampled_clusters_are_excluded(self):
        clusters = [_cluster("a", 1, True), _cluster("b", 1, False, covariates=False)]
        dataset = ClusteredDataset.from_clusters(clusters, p=2)
        assert dataset.arrays.n_clusters == 1
        assert dataset.arrays.cluster_ids == ("a",)
        np.testing.assert_array_equal(dataset.arrays.weights, [2.0])

    def test_missing_covariates_on_sampled_member(self):
        clusters = [_cluster("a", 1, True), _cluster("b", 1, True, covariates=False)]
        dataset = ClusteredDataset.from_clusters(clusters, p=2)
        with pytest.raises(DataQualityError, match="cluster b"):
            dataset.arrays


class TestDerivedDatasets:
    def test_with_weights_checks_length(self, sim_dataset):
        with pytest.raises(DesignError):
            sim_dataset.with_weights(np.ones(3))

    def test_unweighted(self, sim_dataset):
        assert np.all(sim_dataset.unweighted().arrays.weights == 1.0)

    def test_select_covariates(self, sim_dataset):
        sub = sim_dataset.select_covariates([3, 0])
        assert sub.p == 2
        assert sub.covariate_names == ("x4", "x1")
        np.testing.assert_array_equal(sub.arrays.X[..., 0], sim_dataset.arrays.X[..., 3])

    def test_subset_keeps_weights_and_counts(self, sim_dataset):
        sub = sim_dataset.subset([0, 2, 4])
        assert len(sub.clusters) == 3
        np.testing.assert_array_equal(sub.weights, sim_dataset.weights[[0, 2, 4]])
        assert sub.n_cohort == sim_dataset.n_cohort

    def test_cohort_size_from_counts(self, sim_dataset):
        assert sim_dataset.n_cohort == 300
        assert sim_dataset.n_sampled == len(sim_dataset.clusters)
