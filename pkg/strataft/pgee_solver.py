"""
Penalized Weighted GEE Solver

Two-layer iteration for the penalized weighted estimating equation of the
clustered AFT model:

- outer loop: refresh the weighted Kaplan-Meier and the imputed responses
  Ŷ(b) at the anchor b, then set b to the inner solution;
- inner loop: Newton-Raphson on the linearized penalized equation,
  β ← β + [H + nG(β)]⁻¹[U(β) - nG(β)β], with the working correlation
  re-estimated at every β.

Weights are rescaled to sum to the penalty count n inside H, U and the moment
estimators, which makes the fit invariant to a common rescaling of ω.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from strataft.data_model import ClusteredDataset
from strataft.exceptions import (
    ConfigError,
    DegenerateDesignError,
    InsufficientDataError,
    NonConvergenceError,
    RankDeficiencyError,
)
from strataft.weighted_km import ImputedResponses, impute_at
from strataft.working_correlation import (
    CorrelationKind,
    CorrelationStructure,
    build_omega_inverse,
    estimate_structure,
)

logger = logging.getLogger(__name__)

# Relative singularity tolerance for [H + nG]
SINGULAR_RTOL = 1e-12

# Diagonal jitter for the ridge fallback of the WOLS initializer
RIDGE_JITTER = 1e-8


class PenaltyFamily(str, Enum):
    NONE = "none"
    LASSO = "lasso"
    SCAD = "scad"


@dataclass(frozen=True)
class PenaltySpec:
    """Penalty family, tuning parameter λ, SCAD shape a and never-penalized components."""

    family: PenaltyFamily = PenaltyFamily.NONE
    lam: float = 0.0
    a: float = 3.7
    exempt_mask: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "family", PenaltyFamily(self.family))
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ConfigError(f"Penalty lambda must be a finite value ≥ 0, got {self.lam}")
        if self.family == PenaltyFamily.SCAD and self.a <= 2:
            raise ConfigError(f"SCAD shape a must exceed 2, got {self.a}")
        if self.exempt_mask is not None:
            object.__setattr__(self, "exempt_mask", tuple(bool(x) for x in self.exempt_mask))

    @classmethod
    def unpenalized(cls) -> "PenaltySpec":
        return cls(family=PenaltyFamily.NONE, lam=0.0)

    @property
    def is_active(self) -> bool:
        return self.family != PenaltyFamily.NONE and self.lam > 0

    def with_lambda(self, lam: float) -> "PenaltySpec":
        return replace(self, lam=float(lam))

    def exempt(self, p: int) -> np.ndarray:
        if self.exempt_mask is None:
            return np.zeros(p, dtype=bool)
        if len(self.exempt_mask) != p:
            raise ConfigError(f"exempt_mask has length {len(self.exempt_mask)}, expected {p}")
        return np.array(self.exempt_mask, dtype=bool)

    def restricted(self, columns: Sequence[int]) -> "PenaltySpec":
        """Penalty for a covariate subset (exemptions follow their columns)."""
        if self.exempt_mask is None:
            return self
        return replace(self, exempt_mask=tuple(self.exempt_mask[j] for j in columns))


@dataclass(frozen=True)
class SolverConfig:
    """Tolerances and iteration budgets for the two-layer iteration."""

    zeta: float = 1e-6
    gamma: float = 1e-3
    max_inner: int = 50
    max_outer: int = 100
    coef_cutoff: float = 1e-3
    penalty_n: str = "sampled"

    def __post_init__(self):
        for name in ("zeta", "gamma", "max_inner", "max_outer", "coef_cutoff"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"SolverConfig.{name} must be positive, got {getattr(self, name)}")
        if self.penalty_n not in ("sampled", "cohort"):
            raise ConfigError(f"penalty_n must be 'sampled' or 'cohort', got {self.penalty_n!r}")


@dataclass(frozen=True, eq=False)
class FitResult:
    """Result of the two-layer iteration (thresholded coefficients in `beta`)."""

    beta: np.ndarray
    beta_raw: np.ndarray
    active_set: Tuple[int, ...]
    alpha_hat: Union[float, np.ndarray]
    phi_hat: float
    inner_iters: Tuple[int, ...]
    outer_iters: int
    converged: bool
    trace: Tuple[float, ...]
    covariate_names: Tuple[str, ...] = field(default=())
    structure: CorrelationKind = CorrelationKind.INDEPENDENCE
    penalty: PenaltySpec = field(default_factory=PenaltySpec.unpenalized)

    def coefficient_table(self) -> pd.DataFrame:
        names = self.covariate_names or tuple(f"x{j + 1}" for j in range(len(self.beta)))
        selected = np.zeros(len(self.beta), dtype=bool)
        selected[list(self.active_set)] = True
        return pd.DataFrame({"name": list(names), "estimate": self.beta, "selected": selected})

    def summary(self) -> dict:
        alpha = self.alpha_hat.tolist() if isinstance(self.alpha_hat, np.ndarray) else float(self.alpha_hat)
        return {
            "converged": bool(self.converged),
            "outer_iterations": int(self.outer_iters),
            "inner_iterations": [int(s) for s in self.inner_iters],
            "final_delta": float(self.trace[-1]) if self.trace else None,
            "alpha_hat": alpha,
            "phi_hat": float(self.phi_hat),
            "structure": self.structure.value,
            "penalty": self.penalty.family.value,
            "lambda": float(self.penalty.lam),
            "active_set": [self.covariate_names[j] for j in self.active_set]
            if self.covariate_names
            else list(self.active_set),
        }


# =============================================================================
# Penalty derivatives
# =============================================================================


def scad_derivative(abs_beta, lam: float, a: float = 3.7):
    """
    SCAD derivative p'_λ(|β|) = λ I(|β| < λ) + (aλ - |β|)₊/(a - 1) I(|β| ≥ λ).
    """
    t = np.asarray(abs_beta, dtype=float)
    values = np.where(t < lam, lam, np.maximum(a * lam - t, 0.0) / (a - 1))
    return float(values) if values.ndim == 0 else values


def _penalty_derivative(abs_beta: np.ndarray, spec: PenaltySpec) -> np.ndarray:
    if spec.family == PenaltyFamily.NONE or spec.lam == 0:
        return np.zeros_like(abs_beta)
    if spec.family == PenaltyFamily.LASSO:
        return np.full_like(abs_beta, spec.lam)
    return np.asarray(scad_derivative(abs_beta, spec.lam, spec.a), dtype=float)


def penalty_gradient(beta: np.ndarray, spec: PenaltySpec) -> np.ndarray:
    """q_λ(|β|) = p'_λ(|β_j|) sign(β_j), zero on exempt components."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    q = _penalty_derivative(np.abs(beta), spec) * np.sign(beta)
    q[spec.exempt(len(beta))] = 0.0
    return q


def build_G(beta: np.ndarray, spec: PenaltySpec, zeta: float) -> np.ndarray:
    """G = diag{p'_λ(|β_j|)/(ζ + |β_j|)}, zero on exempt components."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    abs_beta = np.abs(beta)
    diag = _penalty_derivative(abs_beta, spec) / (zeta + abs_beta)
    diag[spec.exempt(len(beta))] = 0.0
    return np.diag(diag)


# =============================================================================
# Estimating-equation pieces
# =============================================================================


def weighted_center(X: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Position-wise weighted mean X̄_ω, shape (K, p)."""
    w_pos = weights[:, None] * mask
    totals = w_pos.sum(axis=0)
    if not np.any(totals > 0):
        raise DegenerateDesignError("All cluster weights are zero; X̄_ω is undefined")
    sums = np.einsum("ik,ikp->kp", w_pos, X)
    return sums / np.where(totals > 0, totals, 1.0)[:, None]


def _centered(X: np.ndarray, weights: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return (X - weighted_center(X, weights, mask)[None, :, :]) * mask[:, :, None]


def _resolve_weights(dataset: ClusteredDataset, weights: Optional[np.ndarray]) -> np.ndarray:
    return dataset.arrays.weights if weights is None else np.asarray(weights, dtype=float)


def build_H(
    dataset: ClusteredDataset,
    omega_inv: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    H = Σ_i ω_i X_iᵀ Ω⁻¹ (X_i - X̄_ω).

    Args:
        dataset: Dataset (sampled clusters)
        omega_inv: K×K inverse working correlation
        weights: Optional per-sampled-cluster weights replacing ω

    Raises:
        DegenerateDesignError: If all weights are zero
    """
    arrays = dataset.arrays
    w = _resolve_weights(dataset, weights)
    if not np.any(w > 0):
        raise DegenerateDesignError("All cluster weights are zero; H is undefined")
    Xc = _centered(arrays.X, w, arrays.mask)
    H = np.einsum("i,ikp,kl,ilq->pq", w, arrays.X, omega_inv, Xc)
    return 0.5 * (H + H.T)


def build_U(
    dataset: ClusteredDataset,
    imputed: ImputedResponses,
    beta: np.ndarray,
    omega_inv: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> np.ndarray:
    """U = Σ_i ω_i (X_i - X̄_ω)ᵀ Ω⁻¹ (Ŷ_i - X_i β)."""
    arrays = dataset.arrays
    w = _resolve_weights(dataset, weights)
    Xc = _centered(arrays.X, w, arrays.mask)
    resid = (imputed.values - np.einsum("ikp,p->ik", arrays.X, beta)) * arrays.mask
    return np.einsum("i,ikp,kl,il->p", w, Xc, omega_inv, resid)


def penalty_count(dataset: ClusteredDataset, config: SolverConfig) -> int:
    """Cluster count n used in the nG term and as the weight normalization target."""
    if config.penalty_n == "cohort":
        return dataset.n_cohort
    return dataset.arrays.n_clusters


def normalized_weights(dataset: ClusteredDataset, n_pen: int) -> np.ndarray:
    w = dataset.arrays.weights
    total = float(w.sum())
    if total <= 0:
        raise DegenerateDesignError("All cluster weights are zero")
    return w * (n_pen / total)


def _refresh_structure(
    kind: CorrelationKind,
    dataset: ClusteredDataset,
    imputed: ImputedResponses,
    beta: np.ndarray,
    weights: np.ndarray,
) -> CorrelationStructure:
    arrays = dataset.arrays
    resid = (imputed.values - np.einsum("ikp,p->ik", arrays.X, beta)) * arrays.mask
    if kind == CorrelationKind.INDEPENDENCE:
        # φ̂ is reported only; a fold too small for it does not block the fit
        try:
            return estimate_structure(kind, resid, weights, arrays.p, arrays.mask)
        except InsufficientDataError:
            return CorrelationStructure(kind=kind, K=arrays.K, alpha=0.0, phi=float("nan"))
    return estimate_structure(kind, resid, weights, arrays.p, arrays.mask)


def _check_singular(M: np.ndarray, covariate_names: Sequence[str]) -> None:
    scale = float(np.max(np.abs(np.diag(M)))) if M.size else 0.0
    eigvals, eigvecs = np.linalg.eigh(M)
    smallest = int(np.argmin(np.abs(eigvals)))
    if scale == 0.0 or abs(eigvals[smallest]) <= SINGULAR_RTOL * scale:
        loadings = np.abs(eigvecs[:, smallest])
        worst = np.argsort(loadings)[::-1][: min(3, len(loadings))]
        names = [covariate_names[j] for j in worst if loadings[j] > 1e-6]
        raise RankDeficiencyError(
            f"[H + nG] is singular (smallest |eigenvalue| {abs(eigvals[smallest]):.3g}, "
            f"scale {scale:.3g}); design is rank deficient along {names}"
        )


def inner_newton_solve(
    dataset: ClusteredDataset,
    anchor_b: np.ndarray,
    spec: PenaltySpec,
    config: SolverConfig,
    structure: Union[str, CorrelationKind],
    imputed: Optional[ImputedResponses] = None,
) -> Tuple[np.ndarray, int, CorrelationStructure]:
    """
    Newton-Raphson solve of the linearized penalized equation at anchor b.

    Starting from β⁽⁰⁾ = b, iterates
    β⁽ˢ⁺¹⁾ = β⁽ˢ⁾ + [H + nG(β⁽ˢ⁾)]⁻¹[U(β⁽ˢ⁾) - nG(β⁽ˢ⁾)β⁽ˢ⁾]
    until the sup-norm step is at most γ. Ŷ(b) stays fixed; α̂ and Ω⁻¹ are
    re-estimated at every β⁽ˢ⁾ and used in both H and U.

    Returns:
        Tuple of (β̂(b), inner iteration count, final correlation structure)

    Raises:
        RankDeficiencyError: If [H + nG] is singular
        NonConvergenceError: If max_inner is exceeded (carries the step trace)
    """
    kind = CorrelationKind.parse(structure)
    arrays = dataset.arrays
    b = np.asarray(anchor_b, dtype=float)
    if imputed is None:
        imputed, _ = impute_at(dataset, b)

    n_pen = penalty_count(dataset, config)
    w = normalized_weights(dataset, n_pen)
    beta = b.copy()
    steps: List[float] = []
    current = None

    for s in range(1, config.max_inner + 1):
        current = _refresh_structure(kind, dataset, imputed, beta, w)
        omega_inv = build_omega_inverse(current)
        H = build_H(dataset, omega_inv, weights=w)
        U = build_U(dataset, imputed, beta, omega_inv, weights=w)
        nG = n_pen * build_G(beta, spec, config.zeta)

        M = H + nG
        _check_singular(M, dataset.covariate_names)
        step = linalg.solve(M, U - nG @ beta, assume_a="sym")
        beta = beta + step

        delta = float(np.max(np.abs(step))) if step.size else 0.0
        steps.append(delta)
        logger.debug(f"inner step {s}: sup|Δβ| = {delta:.3e}")
        if delta <= config.gamma:
            return beta, s, current

    raise NonConvergenceError(
        f"Inner Newton-Raphson did not converge in {config.max_inner} iterations "
        f"(last step {steps[-1]:.3e} > γ = {config.gamma})",
        trace=steps,
        last_estimate=beta,
    )


def threshold(beta: np.ndarray, cutoff: float) -> Tuple[np.ndarray, Tuple[int, ...]]:
    """Zero every |β_j| < cutoff; return the thresholded vector and its active set."""
    beta = np.asarray(beta, dtype=float).copy()
    beta[np.abs(beta) < cutoff] = 0.0
    return beta, tuple(int(j) for j in np.flatnonzero(beta))


def wols_initial(dataset: ClusteredDataset, ridge: bool = False) -> np.ndarray:
    """
    Weighted ordinary least squares over uncensored observations.

    β̂ = (X̃ᵀWX̃)⁻¹X̃ᵀWỸ with W = diag(ω_i Δ_ik), no intercept.

    Args:
        dataset: Dataset (sampled clusters)
        ridge: Add a 1e-8 diagonal jitter instead of failing on rank deficiency

    Raises:
        RankDeficiencyError: If the uncensored weighted design is rank deficient
            and ridge is False
    """
    arrays = dataset.arrays
    rows = arrays.mask & arrays.delta
    X = arrays.X[rows]
    y = arrays.y[rows]
    w = np.broadcast_to(arrays.weights[:, None], rows.shape)[rows]
    keep = w > 0
    X, y, w = X[keep], y[keep], w[keep]

    A = X.T @ (w[:, None] * X)
    rhs = X.T @ (w * y)
    p = arrays.p
    rank = int(np.linalg.matrix_rank(A)) if len(w) else 0
    if rank < p:
        if not ridge:
            raise RankDeficiencyError(
                f"Uncensored weighted design has rank {rank} < p = {p} "
                f"({len(w)} uncensored observations); use the ridge fallback or a penalized start"
            )
        logger.warning(f"WOLS design rank {rank} < p = {p}; adding diagonal jitter {RIDGE_JITTER:g}")
        A = A + RIDGE_JITTER * np.eye(p)
    return linalg.solve(A, rhs, assume_a="sym")


def fit(
    dataset: ClusteredDataset,
    spec: PenaltySpec,
    config: SolverConfig,
    structure: Union[str, CorrelationKind],
    initial_b: Optional[np.ndarray] = None,
) -> FitResult:
    """
    Solve the penalized weighted estimating equation.

    Args:
        dataset: Validated dataset
        spec: Penalty specification
        config: Solver tolerances and budgets
        structure: Working correlation kind
        initial_b: Starting anchor (WOLS when omitted)

    Returns:
        FitResult; when max_outer is reached the iterate with the smallest
        outer step is returned with converged = False

    Raises:
        EstimationError: Inner-loop failures, with the outer iteration noted
    """
    kind = CorrelationKind.parse(structure)
    p = dataset.p
    b = wols_initial(dataset) if initial_b is None else np.asarray(initial_b, dtype=float).copy()
    if b.shape != (p,):
        raise ConfigError(f"initial_b has shape {b.shape}, expected ({p},)")

    trace: List[float] = []
    inner_counts: List[int] = []
    best_beta, best_delta, best_structure = b, np.inf, None
    structure_est = None
    converged = False

    for nu in range(1, config.max_outer + 1):
        try:
            imputed, _ = impute_at(dataset, b)
            beta_new, n_inner, structure_est = inner_newton_solve(
                dataset, b, spec, config, kind, imputed=imputed
            )
        except Exception as e:
            e.add_note(f"outer iteration {nu}")
            raise

        delta = float(np.max(np.abs(beta_new - b))) if p else 0.0
        trace.append(delta)
        inner_counts.append(n_inner)
        logger.debug(f"outer iteration {nu}: sup|b_new - b| = {delta:.3e} ({n_inner} inner steps)")

        if delta < best_delta:
            best_beta, best_delta, best_structure = beta_new, delta, structure_est
        b = beta_new
        if delta <= config.gamma:
            converged = True
            best_beta, best_structure = beta_new, structure_est
            break

    if converged:
        logger.info(f"✓ Fit converged in {len(trace)} outer iterations (λ = {spec.lam:g})")
    else:
        logger.warning(
            f"Fit did not converge in {config.max_outer} outer iterations; "
            f"returning best iterate (outer step {best_delta:.3e})"
        )

    beta_thr, active = threshold(best_beta, config.coef_cutoff)
    final_structure = best_structure or structure_est
    return FitResult(
        beta=beta_thr,
        beta_raw=np.asarray(best_beta, dtype=float),
        active_set=active,
        alpha_hat=final_structure.alpha if final_structure else 0.0,
        phi_hat=final_structure.phi if final_structure else float("nan"),
        inner_iters=tuple(inner_counts),
        outer_iters=len(trace),
        converged=converged,
        trace=tuple(trace),
        covariate_names=tuple(dataset.covariate_names),
        structure=kind,
        penalty=spec,
    )
