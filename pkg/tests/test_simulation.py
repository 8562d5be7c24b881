"""Tests for cohort generation, stratified sampling, metrics and the study driver."""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from conftest import REPO_ROOT
from strataft.config import load_scenario
from strataft.exceptions import CalibrationError, ConfigError, SamplingError
from strataft.pgee_solver import PenaltyFamily
from strataft.simulation.generators import (
    ErrorMarginal,
    calibrate_censoring,
    clayton_theta,
    clayton_uniforms,
    gen_covariates,
    generate_cohort,
)
from strataft.simulation.metrics import (
    ReplicationRecord,
    model_error,
    selection_counts,
    summarize_estimation,
    summarize_selection,
)
from strataft.simulation.sampling import event_strata, sample_sizes, stratify_and_sample
from strataft.simulation.study import MethodSpec, SimulationScenario, default_beta_true, run_study


@pytest.fixture
def bundled_data(monkeypatch):
    monkeypatch.setenv("STRATAFT_DATA_DIR", str(REPO_ROOT / "data"))


class TestGenerators:
    def test_clayton_theta(self):
        assert clayton_theta(0.6) == pytest.approx(3.0)
        assert clayton_theta(0.0) == 0.0
        with pytest.raises(ValueError):
            clayton_theta(1.0)

    @pytest.mark.parametrize("tau", [0.3, 0.6])
    def test_copula_matches_kendall_tau(self, tau):
        U = clayton_uniforms(2, tau, 4000, np.random.default_rng(1))
        assert stats.kendalltau(U[:, 0], U[:, 1])[0] == pytest.approx(tau, abs=0.03)
        assert np.all((U > 0) & (U < 1))

    def test_independent_copula(self):
        U = clayton_uniforms(3, 0.0, 4000, np.random.default_rng(2))
        assert abs(stats.kendalltau(U[:, 0], U[:, 2])[0]) < 0.04

    def test_covariate_correlation_across_members(self):
        X = gen_covariates(20_000, 3, 2, np.random.default_rng(3))
        assert X.shape == (20_000, 3, 2)
        assert np.corrcoef(X[:, 0, 0], X[:, 1, 0])[0, 1] == pytest.approx(0.5, abs=0.03)
        assert np.corrcoef(X[:, 0, 1], X[:, 2, 1])[0, 1] == pytest.approx(0.25, abs=0.03)
        assert abs(np.corrcoef(X[:, 0, 0], X[:, 0, 1])[0, 1]) < 0.03

    def test_marginal_aliases(self):
        assert ErrorMarginal.parse("sg") is ErrorMarginal.GUMBEL
        assert ErrorMarginal.parse("Logistic") is ErrorMarginal.LOGISTIC

    def test_calibrated_censoring_hits_target(self, beta_sparse):
        kappa = calibrate_censoring(
            200, 3, beta_sparse, 0.3, "normal", 0.5, np.random.default_rng(4), calibration_size=30_000
        )
        cohort = generate_cohort(20_000, 3, beta_sparse, 0.3, "normal", kappa, np.random.default_rng(5))
        assert cohort.censoring_rate == pytest.approx(0.5, abs=0.02)

    def test_larger_kappa_censors_less(self, beta_sparse):
        light = generate_cohort(5000, 3, beta_sparse, 0.3, "logistic", 1e3, np.random.default_rng(6))
        heavy = generate_cohort(5000, 3, beta_sparse, 0.3, "logistic", 1.0, np.random.default_rng(6))
        assert light.censoring_rate < heavy.censoring_rate

    def test_calibration_target_range(self, beta_sparse):
        with pytest.raises(CalibrationError):
            calibrate_censoring(200, 3, beta_sparse, 0.3, "normal", 1.2, np.random.default_rng(0))


class TestSampling:
    def test_sample_size_rounding(self):
        assert sample_sizes(612, 0.2) == 122
        assert sample_sizes(5, 0.5) == 3

    def test_event_strata(self):
        assert event_strata(np.array([[0, 0, 0], [1, 0, 1], [1, 1, 1]])).tolist() == [1, 3, 4]

    def test_weights_follow_design(self, beta_sparse):
        rng = np.random.default_rng(8)
        cohort = generate_cohort(400, 3, beta_sparse, 0.3, "normal", 10.0, rng)
        dataset = stratify_and_sample(cohort, (0.2, 0.4, 0.6, 1.0), rng)
        strata = dataset.arrays.strata
        for s, count in dataset.strata_counts.items():
            assert count.sampled_size == np.sum(strata == s)
            np.testing.assert_allclose(dataset.weights[strata == s], count.cohort_size / count.sampled_size)
        assert sum(c.cohort_size for c in dataset.strata_counts.values()) == 400

    def test_full_inclusion_keeps_everything(self, beta_sparse):
        rng = np.random.default_rng(9)
        cohort = generate_cohort(50, 3, beta_sparse, 0.3, "normal", 10.0, rng)
        dataset = stratify_and_sample(cohort, (1.0, 1.0, 1.0, 1.0), rng)
        assert dataset.n_sampled == 50
        np.testing.assert_array_equal(dataset.weights, 1.0)

    def test_wrong_number_of_probabilities(self, beta_sparse):
        rng = np.random.default_rng(10)
        cohort = generate_cohort(50, 3, beta_sparse, 0.3, "normal", 10.0, rng)
        with pytest.raises(SamplingError, match="Need 4"):
            stratify_and_sample(cohort, (0.5, 0.5), rng)


class TestMetrics:
    def test_selection_counts(self):
        assert selection_counts(np.array([1.0, 0, 0.5, 0]), np.array([1.0, 0, 0, 2.0])) == (1, 1, False)
        assert selection_counts(np.array([0.9, 0, 0, 1.8]), np.array([1.0, 0, 0, 2.0])) == (2, 0, True)

    def test_model_error(self):
        X = np.array([[[1.0, 0.0], [1.0, 1.0]]])
        assert model_error(np.array([1.5, 1.0]), np.array([1.0, 0.0]), X) == pytest.approx(0.25 + 2.25)

    def test_summaries(self):
        truth = np.array([1.0, 0.0])
        records = [
            ReplicationRecord(0, "m", np.array([1.2, 0.0]), 0.1, 3, True, se_target=0.2, ci_lower=0.8, ci_upper=1.6),
            ReplicationRecord(1, "m", np.array([0.8, 0.3]), 0.3, 5, True, se_target=0.2, ci_lower=0.4, ci_upper=0.9),
            ReplicationRecord(2, "m", np.array([0.0, 0.0]), 0.5, 4, True),
        ]
        sel = summarize_selection(records, truth)
        assert sel.TP == pytest.approx(2 / 3)
        assert sel.FP == pytest.approx(1 / 3)
        assert sel.C_pct == pytest.approx(100 / 3)
        assert sel.ME_median == pytest.approx(0.3)
        assert sel.mean_outer_iters == pytest.approx(4.0)

        est = summarize_estimation(records, truth, target=0)
        assert est.N_c == 2
        assert est.BR_pct == pytest.approx(0.0)
        assert est.SE_a == pytest.approx(0.2)
        assert est.SE_e == pytest.approx(np.std([1.2, 0.8], ddof=1))
        assert est.CP_pct == pytest.approx(50.0)

    def test_estimation_without_selections(self):
        est = summarize_estimation([ReplicationRecord(0, "m", np.zeros(2), 0.0, 1, True)], np.array([1.0, 0.0]))
        assert est.N_c == 0
        assert np.isnan(est.BR_pct)


class TestScenario:
    def test_default_truth(self):
        beta = np.array(default_beta_true(18))
        assert np.flatnonzero(beta).tolist() == [0, 3, 6, 9, 12]
        assert SimulationScenario().support == (0, 3, 6, 9, 12)

    def test_unknown_keys(self):
        with pytest.raises(ConfigError, match="Unknown scenario keys"):
            SimulationScenario.from_mapping({"n_cohorts": 10})

    def test_inconsistent_values(self):
        with pytest.raises(ConfigError, match="beta_true has length 2"):
            SimulationScenario(p=3, beta_true=(1.0, 0.0))
        with pytest.raises(ConfigError, match="inclusion_probs"):
            SimulationScenario(inclusion_probs=(0.5, 0.5))

    def test_method_labels(self):
        assert MethodSpec().label == "weighted-EX-scad-cv"
        assert MethodSpec(rule="oracle").label == "weighted-EX-oracle"
        assert MethodSpec(weighted=False, structure="wi", rule="1se", family="lasso").label == "unweighted-WI-lasso-1se"
        with pytest.raises(ConfigError):
            MethodSpec(rule="cv", family=PenaltyFamily.NONE)
        with pytest.raises(ConfigError):
            MethodSpec(rule="bic")

    def test_bundled_grid_scenario(self, bundled_data):
        scenario, methods = load_scenario("sl_tau03_c90")
        assert scenario.marginal is ErrorMarginal.LOGISTIC
        assert scenario.tau == pytest.approx(0.3)
        assert scenario.censoring == pytest.approx(0.9)
        assert len(methods) == 12

    def test_overrides(self, bundled_data):
        scenario, _ = load_scenario("smoke", {"replications": 2, "seed": None})
        assert scenario.replications == 2
        assert scenario.seed == 7


class TestRunStudy:
    def test_small_study(self, bundled_data):
        scenario, methods = load_scenario("smoke", {"replications": 2})
        result = run_study(scenario, methods, with_variance=False)

        assert result.kappa > 0
        assert result.failures == ()
        assert list(result.selection["method"]) == ["weighted-EX-scad-cv", "weighted-EX-oracle"]
        assert len(result.raw) == 4
        assert result.selection["replications"].tolist() == [2, 2]
        assert 0 < result.mean_censoring < 1
        oracle = result.raw[result.raw["method"] == "weighted-EX-oracle"]
        assert (oracle[["beta_2", "beta_3", "beta_5", "beta_6"]] == 0).all().all()

    def test_duplicate_methods(self):
        with pytest.raises(ConfigError, match="Duplicate"):
            run_study(SimulationScenario(replications=1), [MethodSpec(), MethodSpec()])


@pytest.mark.slow
class TestAcceptance:
    def test_weighted_selection_recovers_support(self, bundled_data):
        scenario, methods = load_scenario("smoke", {"replications": 40})
        result = run_study(scenario, methods, with_variance=False)
        cv = result.selection.set_index("method").loc["weighted-EX-scad-cv"]
        assert cv["TP"] >= 1.9
        assert cv["FP"] <= 1.5

    def test_weighted_oracle_is_nearly_unbiased_with_valid_intervals(self, bundled_data):
        scenario, methods = load_scenario("smoke", {"replications": 60})
        scenario = dataclasses.replace(scenario, variance_replicates=50)
        result = run_study(scenario, methods)
        oracle = result.estimation.set_index("method").loc["weighted-EX-oracle"]
        assert abs(oracle["BR_pct"]) < 10
        assert 80 <= oracle["CP_pct"] <= 100
        assert oracle["SE_a"] == pytest.approx(oracle["SE_e"], rel=0.4)
