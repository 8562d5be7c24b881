"""
Working Correlation Structures

Working covariance Ω(α) for the weighted GEE and the weighted moment
estimators of the dispersion φ and the correlation parameter(s) α computed
from imputed residuals r̂_ik = Ŷ_ik(b) - X_ik β.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy import linalg

from strataft.exceptions import (
    InsufficientDataError,
    NumericError,
    StructureNotApplicableError,
)

logger = logging.getLogger(__name__)

# Distance kept from the positive-definiteness boundary when clamping α̂
EPS_PD = 1e-4

# Shrinkage grid toward the identity for unstructured estimates
SHRINKAGE_GRID = np.round(np.arange(0.05, 1.0001, 0.05), 2)


class CorrelationKind(str, Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    UNSTRUCTURED = "unstructured"

    @classmethod
    def parse(cls, value: Union[str, "CorrelationKind"]) -> "CorrelationKind":
        if isinstance(value, cls):
            return value
        aliases = {"wi": "independence", "ind": "independence", "ex": "exchangeable",
                   "exch": "exchangeable", "un": "unstructured"}
        key = str(value).strip().lower()
        return cls(aliases.get(key, key))


@dataclass(frozen=True, eq=False)
class CorrelationStructure:
    """
    A working correlation structure with its current parameter estimates.

    `alpha` is a scalar for Exchangeable and a K×K matrix for Unstructured;
    `clamped` records that the moment estimate was projected into the
    positive-definite region.
    """

    kind: CorrelationKind
    K: int
    alpha: Union[float, np.ndarray] = 0.0
    phi: float = 1.0
    clamped: bool = False

    @classmethod
    def independence(cls, K: int, phi: float = 1.0) -> "CorrelationStructure":
        return cls(kind=CorrelationKind.INDEPENDENCE, K=K, alpha=0.0, phi=phi)

    def omega(self) -> np.ndarray:
        """The working correlation matrix Ω(α)."""
        if self.kind == CorrelationKind.INDEPENDENCE or self.K == 1:
            return np.eye(self.K)
        if self.kind == CorrelationKind.EXCHANGEABLE:
            a = float(self.alpha)
            return (1 - a) * np.eye(self.K) + a * np.ones((self.K, self.K))
        return np.asarray(self.alpha, dtype=float)

    def alpha_summary(self) -> Union[float, list]:
        if isinstance(self.alpha, np.ndarray):
            return self.alpha.tolist()
        return float(self.alpha)


@dataclass(frozen=True)
class AlphaEstimate:
    value: Union[float, np.ndarray]
    clamped: bool = False


def _prepare(residuals: np.ndarray, weights: np.ndarray, mask: Optional[np.ndarray]):
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 1:
        r = r[:, None]
    w = np.asarray(weights, dtype=float)
    m = np.ones_like(r, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return np.where(m, r, 0.0), w, m


def _require_constant_size(mask: np.ndarray, what: str) -> None:
    if not mask.all():
        raise StructureNotApplicableError(
            f"{what} moment estimation requires equal cluster sizes; "
            f"found sizes {sorted(set(mask.sum(axis=1).tolist()))}"
        )


def estimate_dispersion(
    residuals: np.ndarray,
    weights: np.ndarray,
    p: int,
    mask: Optional[np.ndarray] = None,
) -> float:
    """
    Weighted moment estimate of the dispersion.

    φ̂ = Σ_i ω_i Σ_k r̂²_ik / (Σ_i ω_i K_i - p)

    Args:
        residuals: (n, K) residuals
        weights: (n,) cluster weights
        p: Number of regression coefficients
        mask: Optional (n, K) member mask for ragged clusters

    Returns:
        φ̂ (0 when all residuals are 0)

    Raises:
        InsufficientDataError: If the denominator is not positive
    """
    r, w, m = _prepare(residuals, weights, mask)
    denominator = float(np.sum(w * m.sum(axis=1))) - p
    if denominator <= 0:
        raise InsufficientDataError(
            f"Dispersion denominator Σω·K - p = {denominator:.4g} is not positive"
        )
    return float(np.sum(w[:, None] * r ** 2) / denominator)


def _clamp_exchangeable(alpha: float, K: int) -> Tuple[float, bool]:
    lower = -1.0 / (K - 1) + EPS_PD
    upper = 1.0 - EPS_PD
    if alpha < lower:
        return lower, True
    if alpha > upper:
        return upper, True
    return alpha, False


def estimate_alpha_exchangeable(
    residuals: np.ndarray,
    weights: np.ndarray,
    p: int,
    phi: float,
    mask: Optional[np.ndarray] = None,
) -> AlphaEstimate:
    """
    Weighted moment estimate of the exchangeable correlation.

    α̂ = φ̂⁻¹ Σ_i Σ_{k>k'} ω_i r̂_ik r̂_ik' / (½ Σ_i ω_i K(K-1)), clamped into
    (-1/(K-1) + ε, 1 - ε).

    Raises:
        StructureNotApplicableError: If K = 1 or cluster sizes differ
    """
    r, w, m = _prepare(residuals, weights, mask)
    K = r.shape[1]
    if K < 2:
        raise StructureNotApplicableError("Exchangeable correlation needs clusters of size ≥ 2")
    _require_constant_size(m, "Exchangeable")
    if phi <= 0:
        return AlphaEstimate(0.0, False)

    row_sums = r.sum(axis=1)
    cross = 0.5 * (row_sums ** 2 - np.sum(r ** 2, axis=1))
    numerator = float(np.sum(w * cross))
    denominator = 0.5 * float(np.sum(w)) * K * (K - 1)
    alpha = numerator / denominator / phi

    value, clamped = _clamp_exchangeable(alpha, K)
    if clamped:
        logger.warning(f"Exchangeable α̂ = {alpha:.4f} outside the positive-definite range; clamped to {value:.4f}")
    return AlphaEstimate(value, clamped)


def _is_positive_definite(matrix: np.ndarray, tol: float = EPS_PD) -> bool:
    return bool(np.min(np.linalg.eigvalsh(matrix)) >= tol)


def estimate_alpha_general(
    residuals: np.ndarray,
    weights: np.ndarray,
    p: int,
    phi: float,
    mask: Optional[np.ndarray] = None,
) -> AlphaEstimate:
    """
    Weighted general (unstructured) moment estimate of the correlation matrix.

    α̂_kk' = φ̂⁻¹ Σ_i ω_i r̂_ik r̂_ik' / (Σ_i ω_i - p) off the diagonal, unit
    diagonal. A matrix that is not positive definite is shrunk toward the
    identity, (1-δ)Â + δI, with the smallest δ on a 0.05 grid that restores it.

    Raises:
        InsufficientDataError: If Σω - p is not positive
        StructureNotApplicableError: If cluster sizes differ
    """
    r, w, m = _prepare(residuals, weights, mask)
    _require_constant_size(m, "Unstructured")
    K = r.shape[1]
    denominator = float(np.sum(w)) - p
    if denominator <= 0:
        raise InsufficientDataError(
            f"Correlation denominator Σω - p = {denominator:.4g} is not positive"
        )
    if phi <= 0:
        return AlphaEstimate(np.eye(K), False)

    matrix = np.einsum("i,ik,il->kl", w, r, r) / denominator / phi
    matrix = 0.5 * (matrix + matrix.T)
    np.fill_diagonal(matrix, 1.0)

    if _is_positive_definite(matrix):
        return AlphaEstimate(matrix, False)

    for delta in SHRINKAGE_GRID:
        shrunk = (1 - delta) * matrix + delta * np.eye(K)
        if _is_positive_definite(shrunk):
            logger.warning(f"Unstructured α̂ not positive definite; shrunk toward identity with δ = {delta:.2f}")
            return AlphaEstimate(shrunk, True)

    # δ = 1 is the identity and always passes; unreachable in practice
    return AlphaEstimate(np.eye(K), True)


def estimate_structure(
    kind: Union[str, CorrelationKind],
    residuals: np.ndarray,
    weights: np.ndarray,
    p: int,
    mask: Optional[np.ndarray] = None,
) -> CorrelationStructure:
    """
    Estimate φ and α for the requested working structure from residuals.

    Clusters of size 1 make every structure equal to the scalar 1, so α is not
    estimated there; φ̂ = 0 short-circuits α̂ to 0.
    """
    kind = CorrelationKind.parse(kind)
    r, w, m = _prepare(residuals, weights, mask)
    K = r.shape[1]
    phi = estimate_dispersion(r, w, p, m)

    if kind == CorrelationKind.INDEPENDENCE or K == 1:
        return CorrelationStructure(kind=kind, K=K, alpha=0.0, phi=phi)
    if phi == 0:
        alpha = 0.0 if kind == CorrelationKind.EXCHANGEABLE else np.eye(K)
        return CorrelationStructure(kind=kind, K=K, alpha=alpha, phi=phi)
    if kind == CorrelationKind.EXCHANGEABLE:
        estimate = estimate_alpha_exchangeable(r, w, p, phi, m)
    else:
        estimate = estimate_alpha_general(r, w, p, phi, m)
    return CorrelationStructure(
        kind=kind, K=K, alpha=estimate.value, phi=phi, clamped=estimate.clamped
    )


def build_omega_inverse(structure: CorrelationStructure) -> np.ndarray:
    """
    Inverse working correlation Ω(α)⁻¹.

    Exchangeable uses the closed form
    ((1-α)I + α11ᵀ)⁻¹ = (I - α/(1+(K-1)α) 11ᵀ) / (1-α).

    Raises:
        NumericError: If Ω(α) is not positive definite
    """
    K = structure.K
    if structure.kind == CorrelationKind.INDEPENDENCE or K == 1:
        return np.eye(K)

    if structure.kind == CorrelationKind.EXCHANGEABLE:
        a = float(structure.alpha)
        if not (-1.0 / (K - 1) < a < 1.0):
            raise NumericError(f"Exchangeable α = {a} gives a non-positive-definite Ω for K = {K}")
        return (np.eye(K) - a / (1 + (K - 1) * a) * np.ones((K, K))) / (1 - a)

    omega = np.asarray(structure.alpha, dtype=float)
    try:
        factor = linalg.cho_factor(omega)
    except linalg.LinAlgError as e:
        raise NumericError(f"Unstructured Ω is not positive definite: {e}") from e
    inverse = linalg.cho_solve(factor, np.eye(K))
    return 0.5 * (inverse + inverse.T)
