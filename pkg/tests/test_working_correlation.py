"""Tests for the dispersion and correlation moment estimators."""

import numpy as np
import pytest

from strataft.exceptions import InsufficientDataError, NumericError, StructureNotApplicableError
from strataft.working_correlation import (
    EPS_PD,
    CorrelationKind,
    CorrelationStructure,
    build_omega_inverse,
    estimate_alpha_exchangeable,
    estimate_alpha_general,
    estimate_dispersion,
    estimate_structure,
)


class TestDispersion:
    def test_unit_residuals(self):
        assert estimate_dispersion(np.ones((4, 2)), np.ones(4), p=0) == pytest.approx(1.0)

    def test_degrees_of_freedom(self):
        r = np.array([[1.0, -1.0], [2.0, 0.0]])
        # (1 + 1 + 4) / (2 * 2 - 1)
        assert estimate_dispersion(r, np.ones(2), p=1) == pytest.approx(2.0)

    def test_nonpositive_denominator(self):
        with pytest.raises(InsufficientDataError):
            estimate_dispersion(np.ones((1, 2)), np.ones(1), p=2)

    def test_mask_excludes_padding(self):
        r = np.array([[1.0, 5.0], [1.0, 1.0]])
        mask = np.array([[True, False], [True, True]])
        assert estimate_dispersion(r, np.ones(2), p=0, mask=mask) == pytest.approx(1.0)


class TestExchangeable:
    def test_identical_residuals_clamp_at_upper_bound(self):
        r = np.ones((10000, 3))
        est = estimate_alpha_exchangeable(r, np.ones(10000), p=1, phi=estimate_dispersion(r, np.ones(10000), 1))
        assert est.clamped
        assert est.value == pytest.approx(1 - EPS_PD)

    def test_lower_bound_clamp(self):
        r = np.array([[1.0, 1.0, -2.0]])
        phi = estimate_dispersion(r, np.ones(1), p=0)
        assert phi == pytest.approx(2.0)
        est = estimate_alpha_exchangeable(r, np.ones(1), p=0, phi=phi)
        assert est.clamped
        assert est.value == pytest.approx(-0.5 + EPS_PD)

    def test_interior_value_is_not_clamped(self):
        r = np.array([[1.0, 0.5], [-1.0, -0.5], [0.3, -0.2]])
        phi = estimate_dispersion(r, np.ones(3), p=0)
        est = estimate_alpha_exchangeable(r, np.ones(3), p=0, phi=phi)
        expected = (0.5 + 0.5 - 0.06) / 3 / phi
        assert not est.clamped
        assert est.value == pytest.approx(expected)

    def test_sign_flip_of_residuals_keeps_alpha(self):
        rng = np.random.default_rng(0)
        r = rng.normal(size=(50, 3))
        w = rng.uniform(1, 3, size=50)
        a1 = estimate_structure("exchangeable", r, w, p=2).alpha
        a2 = estimate_structure("exchangeable", -r, w, p=2).alpha
        assert a1 == pytest.approx(a2)

    def test_size_one_clusters(self):
        with pytest.raises(StructureNotApplicableError):
            estimate_alpha_exchangeable(np.ones((5, 1)), np.ones(5), p=0, phi=1.0)

    def test_ragged_clusters(self):
        mask = np.array([[True, True], [True, False]])
        with pytest.raises(StructureNotApplicableError, match="equal cluster sizes"):
            estimate_alpha_exchangeable(np.ones((2, 2)), np.ones(2), p=0, phi=1.0, mask=mask)

    def test_zero_dispersion_gives_zero(self):
        assert estimate_alpha_exchangeable(np.zeros((3, 2)), np.ones(3), p=0, phi=0.0).value == 0.0


class TestUnstructured:
    def test_shrinks_toward_identity(self):
        r = np.ones((10, 2))
        phi = estimate_dispersion(r, np.ones(10), p=1)
        est = estimate_alpha_general(r, np.ones(10), p=1, phi=phi)
        # raw off-diagonal 19/18 needs δ = 0.10
        assert est.clamped
        np.testing.assert_allclose(est.value, [[1.0, 0.95], [0.95, 1.0]])

    def test_positive_definite_estimate_is_kept(self):
        rng = np.random.default_rng(3)
        r = rng.normal(size=(200, 3))
        phi = estimate_dispersion(r, np.ones(200), p=0)
        est = estimate_alpha_general(r, np.ones(200), p=0, phi=phi)
        assert not est.clamped
        np.testing.assert_allclose(np.diag(est.value), 1.0)
        np.testing.assert_allclose(est.value, est.value.T)

    def test_insufficient_clusters(self):
        with pytest.raises(InsufficientDataError):
            estimate_alpha_general(np.ones((2, 2)), np.ones(2), p=2, phi=1.0)


class TestEstimateStructure:
    def test_singletons_reduce_to_independence(self):
        s = estimate_structure("exchangeable", np.ones((6, 1)), np.ones(6), p=1)
        assert s.alpha == 0.0
        np.testing.assert_array_equal(build_omega_inverse(s), [[1.0]])

    def test_weight_scale_invariance(self):
        rng = np.random.default_rng(1)
        r = rng.normal(size=(30, 3))
        w = rng.uniform(1, 10, size=30)
        s1 = estimate_structure("exchangeable", r, w / w.sum() * 30, p=0)
        s2 = estimate_structure("exchangeable", r, 7 * w / w.sum() * 30, p=0)
        assert s1.alpha == pytest.approx(s2.alpha)

    def test_aliases(self):
        assert CorrelationKind.parse("ex") is CorrelationKind.EXCHANGEABLE
        assert CorrelationKind.parse("WI") is CorrelationKind.INDEPENDENCE
        assert CorrelationKind.parse("un") is CorrelationKind.UNSTRUCTURED
        with pytest.raises(ValueError):
            CorrelationKind.parse("ar1")


class TestOmegaInverse:
    @pytest.mark.parametrize("alpha", [-0.3, 0.0, 0.4, 0.9])
    def test_exchangeable_closed_form(self, alpha):
        s = CorrelationStructure(kind=CorrelationKind.EXCHANGEABLE, K=4, alpha=alpha)
        np.testing.assert_allclose(build_omega_inverse(s), np.linalg.inv(s.omega()), atol=1e-12)

    def test_exchangeable_outside_range(self):
        s = CorrelationStructure(kind=CorrelationKind.EXCHANGEABLE, K=3, alpha=-0.6)
        with pytest.raises(NumericError):
            build_omega_inverse(s)

    def test_unstructured(self):
        omega = np.array([[1.0, 0.3, 0.1], [0.3, 1.0, 0.2], [0.1, 0.2, 1.0]])
        s = CorrelationStructure(kind=CorrelationKind.UNSTRUCTURED, K=3, alpha=omega)
        np.testing.assert_allclose(build_omega_inverse(s) @ omega, np.eye(3), atol=1e-12)

    def test_unstructured_not_positive_definite(self):
        omega = np.array([[1.0, 1.2], [1.2, 1.0]])
        s = CorrelationStructure(kind=CorrelationKind.UNSTRUCTURED, K=2, alpha=omega)
        with pytest.raises(NumericError):
            build_omega_inverse(s)
