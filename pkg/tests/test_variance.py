"""Tests for multiplier-resampling standard errors."""

import numpy as np
import pytest

from strataft.exceptions import ConfigError, VarianceError
from strataft.pgee_solver import PenaltyFamily, PenaltySpec, SolverConfig, fit
from strataft.variance import MultiplierLaw, ResampleConfig, resample_variance, wald_ci


@pytest.fixture
def point_fit(sim_dataset):
    return fit(sim_dataset, PenaltySpec(PenaltyFamily.SCAD, lam=0.1), SolverConfig(), "independence")


def test_wald_interval():
    lo, hi = wald_ci(1.0, 1.0, 0.95)
    assert lo == pytest.approx(1 - 1.959964, abs=1e-6)
    assert hi == pytest.approx(1 + 1.959964, abs=1e-6)
    lo, hi = wald_ci(np.array([0.0, 2.0]), np.array([1.0, 0.5]), 0.90)
    np.testing.assert_allclose(hi - lo, 2 * 1.644854 * np.array([1.0, 0.5]), atol=1e-5)


@pytest.mark.parametrize("law", [MultiplierLaw.EXPONENTIAL, MultiplierLaw.TWOPOINT])
def test_multiplier_moments(law):
    Z = law.draw(np.random.default_rng(0), 200_000)
    assert Z.mean() == pytest.approx(1.0, abs=0.01)
    assert Z.var() == pytest.approx(1.0, abs=0.02)
    assert np.all(Z >= 0)


class TestResampleVariance:
    def test_unit_multipliers_give_zero_se(self, sim_dataset, point_fit):
        result = resample_variance(
            sim_dataset, point_fit, ResampleConfig(B=5, law="one"), SolverConfig(), "independence"
        )
        assert result.B_effective == 5
        np.testing.assert_array_equal(result.se, 0.0)
        np.testing.assert_array_equal(result.ci_lower, result.estimate)

    def test_exponential_multipliers(self, sim_dataset, point_fit):
        rconfig = ResampleConfig(B=20, law="exp", seed=3)
        a = resample_variance(sim_dataset, point_fit, rconfig, SolverConfig(), "independence")
        b = resample_variance(sim_dataset, point_fit, rconfig, SolverConfig(), "independence")

        assert a.columns == point_fit.active_set
        assert np.all(a.se > 0)
        np.testing.assert_array_equal(a.se, b.se)
        np.testing.assert_allclose(a.covariance, a.covariance.T)
        np.testing.assert_allclose(a.estimate, point_fit.beta[list(a.columns)])
        np.testing.assert_allclose((a.ci_lower + a.ci_upper) / 2, a.estimate)

        frame = a.to_frame()
        assert list(frame.columns) == ["name", "estimate", "se", "ci_lower", "ci_upper", "significant"]
        assert frame.loc[frame["name"] == "x1", "significant"].item()

    def test_all_covariates_when_not_restricted(self, sim_dataset, point_fit):
        rconfig = ResampleConfig(B=3, law="one", refit_active_only=False)
        result = resample_variance(sim_dataset, point_fit, rconfig, SolverConfig(), "independence")
        assert result.columns == tuple(range(6))

    def test_empty_active_set(self, sim_dataset):
        empty = fit(sim_dataset, PenaltySpec(PenaltyFamily.LASSO, lam=100.0), SolverConfig(), "independence")
        result = resample_variance(sim_dataset, empty, ResampleConfig(B=5), SolverConfig(), "independence")
        assert result.names == ()
        assert result.B_effective == 0
        assert result.note == "empty active set"

    def test_nonconverged_point_fit(self, sim_dataset):
        stalled = fit(
            sim_dataset, PenaltySpec.unpenalized(), SolverConfig(gamma=1e-10, max_outer=1), "independence"
        )
        with pytest.raises(VarianceError, match="converged point fit"):
            resample_variance(sim_dataset, stalled, ResampleConfig(B=5), SolverConfig(), "independence")


class TestResampleConfig:
    def test_needs_two_replicates(self):
        with pytest.raises(ConfigError):
            ResampleConfig(B=1)

    def test_level_range(self):
        with pytest.raises(ConfigError):
            ResampleConfig(level=1.0)

    def test_law_from_string(self):
        assert ResampleConfig(law="twopoint").law is MultiplierLaw.TWOPOINT
