"""Tests for the weighted pooled Kaplan-Meier estimator and imputation."""

import numpy as np
import pytest

from strataft.exceptions import DegenerateSurvivalError
from strataft.weighted_km import (
    compute_residuals,
    conditional_tail_mean,
    conditional_tail_means,
    fit_weighted_km,
    impute_at,
)


class TestFitWeightedKm:
    def test_uncensored_step(self):
        surv = fit_weighted_km(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 1]), np.ones(3))
        assert surv.cdf(2.5) == pytest.approx(2 / 3, abs=1e-12)
        np.testing.assert_allclose(surv.jump_masses, [1 / 3, 1 / 3, 1 / 3])
        assert surv.tail_defect == pytest.approx(0.0)

    def test_middle_censoring(self):
        surv = fit_weighted_km(np.array([1.0, 2.0, 3.0]), np.array([1, 0, 1]), np.ones(3))
        assert surv.cdf(2.5) == pytest.approx(1 / 3, abs=1e-12)
        np.testing.assert_allclose(surv.jump_points, [1.0, 3.0])
        np.testing.assert_allclose(surv.jump_masses, [1 / 3, 2 / 3])

    def test_cdf_is_left_limit_at_jumps(self):
        surv = fit_weighted_km(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 1]), np.ones(3))
        assert surv.cdf(1.0) == 0.0
        assert surv.cdf(2.0) == pytest.approx(1 / 3)
        assert surv.survival(0.0) == 1.0

    def test_weights_enter_the_risk_set(self):
        # cluster weights 3 and 1, one member each
        surv = fit_weighted_km(np.array([1.0, 2.0]), np.array([1, 1]), np.array([3.0, 1.0]))
        assert surv.cdf(1.5) == pytest.approx(0.75)

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(20, 3))
        d = rng.uniform(size=(20, 3)) < 0.6
        w = rng.uniform(1, 5, size=20)
        a = fit_weighted_km(e, d, w)
        b = fit_weighted_km(e, d, 13.0 * w)
        np.testing.assert_allclose(a.survival_after, b.survival_after, atol=1e-12)

    def test_reduces_to_ecdf_without_censoring(self):
        rng = np.random.default_rng(5)
        e = rng.normal(size=50)
        surv = fit_weighted_km(e, np.ones(50, dtype=bool), np.ones(50))
        grid = np.linspace(-2.5, 2.5, 41)
        np.testing.assert_allclose(surv.cdf(grid), [(e < t).mean() for t in grid], atol=1e-12)

    def test_ties_share_the_risk_set(self):
        surv = fit_weighted_km(np.array([1.0, 1.0, 2.0, 3.0]), np.array([1, 1, 1, 1]), np.ones(4))
        np.testing.assert_allclose(surv.jump_points, [1.0, 2.0, 3.0])
        # each tied event takes its own factor against the shared risk set of 4
        assert surv.cdf(1.5) == pytest.approx(1 - (3 / 4) ** 2)

    def test_censored_tie_stays_at_risk(self):
        surv = fit_weighted_km(np.array([1.0, 1.0, 2.0]), np.array([1, 0, 1]), np.ones(3))
        assert surv.cdf(1.5) == pytest.approx(1 / 3)

    def test_monotone_and_mass_accounted(self):
        rng = np.random.default_rng(6)
        e = rng.normal(size=(40, 2))
        d = rng.uniform(size=(40, 2)) < 0.5
        surv = fit_weighted_km(e, d, rng.uniform(0.5, 2.0, size=40))
        assert np.all(np.diff(surv.survival_after) <= 1e-15)
        assert surv.total_mass_check == pytest.approx(1.0)

    def test_unit_multipliers_change_nothing(self):
        e = np.array([[0.3, -1.2], [2.0, 0.1]])
        d = np.array([[1, 0], [1, 1]])
        w = np.array([2.0, 1.0])
        a = fit_weighted_km(e, d, w)
        b = fit_weighted_km(e, d, w, multipliers=np.ones(2))
        np.testing.assert_array_equal(a.survival_after, b.survival_after)

    def test_zero_weight_members_are_dropped(self):
        surv = fit_weighted_km(np.array([1.0, 2.0, 3.0]), np.array([1, 1, 1]), np.array([1.0, 0.0, 1.0]))
        np.testing.assert_allclose(surv.jump_points, [1.0, 3.0])

    def test_no_events(self):
        with pytest.raises(DegenerateSurvivalError):
            fit_weighted_km(np.array([1.0, 2.0]), np.array([0, 0]), np.ones(2))


class TestTailMeans:
    def test_tail_mean_below_support(self):
        surv = fit_weighted_km(np.array([0.0, 1.0, 2.0]), np.array([1, 1, 1]), np.ones(3))
        assert conditional_tail_mean(surv, -1.0) == pytest.approx(1.0)
        assert conditional_tail_mean(surv, 0.5) == pytest.approx(1.5)

    def test_tail_is_strictly_above_the_cutpoint(self):
        surv = fit_weighted_km(np.array([0.0, 1.0, 2.0]), np.array([1, 1, 1]), np.ones(3))
        assert conditional_tail_mean(surv, 1.0) == pytest.approx(2.0)

    def test_beyond_last_jump_returns_cutpoint(self):
        surv = fit_weighted_km(np.array([0.0, 1.0]), np.array([1, 1]), np.ones(2))
        np.testing.assert_allclose(conditional_tail_means(surv, np.array([1.0, 4.0])), [1.0, 4.0])


class TestImputation:
    def test_imputed_responses_dominate_observed(self, sim_dataset, beta_sparse):
        imputed, _ = impute_at(sim_dataset, beta_sparse)
        arrays = sim_dataset.arrays
        censored = arrays.mask & ~arrays.delta
        assert np.any(censored)
        assert np.all(imputed.values[censored] >= arrays.y[censored])
        np.testing.assert_array_equal(imputed.values[arrays.delta], arrays.y[arrays.delta])
        np.testing.assert_array_equal(imputed.imputed_flags, censored)

    def test_imputation_example(self, make_dataset):
        # x = 1, Y = (-0.5, 0.5 censored, 1.5), b = 0.5
        dataset = make_dataset(
            np.ones((3, 1, 1)), np.array([[-0.5], [0.5], [1.5]]), np.array([[True], [False], [True]])
        )
        imputed, surv = impute_at(dataset, np.array([0.5]))
        np.testing.assert_allclose(surv.jump_masses, [1 / 3, 2 / 3])
        np.testing.assert_allclose(imputed.values[:, 0], [-0.5, 1.5, 1.5])

    def test_residuals_at_beta(self, make_dataset):
        X = np.array([[[1.0, 2.0], [0.0, 1.0]]])
        dataset = make_dataset(X, np.array([[3.0, 1.0]]), np.ones((1, 2), dtype=bool))
        np.testing.assert_allclose(compute_residuals(dataset, np.array([1.0, 0.5])), [[1.0, 0.5]])
