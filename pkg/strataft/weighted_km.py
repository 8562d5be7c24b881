"""
Weighted Pooled Kaplan-Meier over Residuals

Residuals e_ik(b) = Y_ik - X_ik b are pooled across clusters and members into a
single weighted product-limit estimator F̂, which drives the weight-adjusted
Buckley-James imputation of censored log-times. Multipliers Z_i (cluster level)
give the perturbed estimator used by resampling.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np

from strataft.data_model import ClusteredDataset
from strataft.exceptions import DegenerateSurvivalError

logger = logging.getLogger(__name__)

# Remaining survival mass at or below which the tail mean collapses to the cutpoint
EPS_TAIL = 1e-12


@dataclass(frozen=True, eq=False)
class WeightedSurvival:
    """
    Step function of the weighted pooled Kaplan-Meier estimator.

    Attributes:
        jump_points: Sorted distinct uncensored residual values
        survival_after: Ŝ(t+) at each jump point
        total_mass_check: Σ jump masses + tail_defect (1 up to rounding)
        tail_defect: Survival mass left beyond the last uncensored residual
    """

    jump_points: np.ndarray
    survival_after: np.ndarray
    total_mass_check: float
    tail_defect: float

    @property
    def jump_masses(self) -> np.ndarray:
        before = np.concatenate(([1.0], self.survival_after[:-1]))
        return before - self.survival_after

    def cdf(self, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        """F̂(t) = 1 - Π_{e < t}(...), i.e. the left limit at jump points."""
        t_arr = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_points, t_arr, side="left") - 1
        surv = np.where(idx >= 0, self.survival_after[np.clip(idx, 0, None)], 1.0)
        values = 1.0 - surv
        return float(values) if values.ndim == 0 else values

    def survival(self, t: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
        return 1.0 - self.cdf(t)


@dataclass(frozen=True, eq=False)
class ImputedResponses:
    """Ŷ_ik,ω(b) per member slot (n, K); imputed_flags marks censored members."""

    values: np.ndarray
    imputed_flags: np.ndarray


def compute_residuals(dataset: ClusteredDataset, beta: np.ndarray) -> np.ndarray:
    """
    Residuals e_ik = log_time_ik - X_ik β for the sampled clusters.

    Returns:
        (n, K) array; padded member slots are 0
    """
    beta = np.asarray(beta, dtype=float)
    arrays = dataset.arrays
    if beta.shape != (arrays.p,):
        raise ValueError(f"beta has shape {beta.shape}, expected ({arrays.p},)")
    fitted = np.einsum("ikp,p->ik", arrays.X, beta)
    return np.where(arrays.mask, arrays.y - fitted, 0.0)


def fit_weighted_km(
    residuals: np.ndarray,
    events: np.ndarray,
    weights: np.ndarray,
    multipliers: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> WeightedSurvival:
    """
    Weighted pooled Kaplan-Meier estimator over residuals.

    F̂(t) = 1 - Π_{e_ik < t} [1 - w_i Δ_ik / Σ_{j,l} w_j I(e_jl ≥ e_ik)],
    w_i = Z_i ω_i. Tied uncensored residuals each contribute their own factor
    against the shared risk-set total; censored residuals tied with an event
    stay in its risk set. Members with w_i ≤ 0 are dropped.

    Args:
        residuals: (n, K) residuals (or a flat vector with one member per cluster)
        events: Event indicators with the same shape as residuals
        weights: (n,) cluster weights ω_i
        multipliers: Optional (n,) cluster multipliers Z_i, default 1
        mask: Optional (n, K) member mask

    Returns:
        WeightedSurvival

    Raises:
        DegenerateSurvivalError: If no uncensored residual carries positive weight
    """
    e = np.asarray(residuals, dtype=float)
    d = np.asarray(events, dtype=bool)
    if e.ndim == 1:
        e, d = e[:, None], d[:, None]
    w = np.asarray(weights, dtype=float)
    if multipliers is not None:
        w = w * np.asarray(multipliers, dtype=float)
    m = np.ones_like(e, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    w_obs = np.broadcast_to(w[:, None], e.shape)
    keep = m & (w_obs > 0)
    # Boolean indexing flattens in (cluster, member) order
    e_flat, d_flat, w_flat = e[keep], d[keep], w_obs[keep]

    if not np.any(d_flat):
        raise DegenerateSurvivalError(
            "No uncensored residual with positive weight; Kaplan-Meier is undefined"
        )

    order = np.argsort(e_flat, kind="stable")
    e_sorted, d_sorted, w_sorted = e_flat[order], d_flat[order], w_flat[order]

    # Σ w over e ≥ value, via reverse cumulative sums at the first index of each value
    tail_totals = np.cumsum(w_sorted[::-1])[::-1]
    risk = tail_totals[np.searchsorted(e_sorted, e_sorted, side="left")]

    ev_values = e_sorted[d_sorted]
    factors = 1.0 - w_sorted[d_sorted] / risk[d_sorted]
    cumulative = np.cumprod(factors)

    jump_points, last_index = np.unique(ev_values[::-1], return_index=True)
    last_index = len(ev_values) - 1 - last_index
    survival_after = np.clip(cumulative[last_index], 0.0, 1.0)

    tail_defect = float(survival_after[-1])
    masses = np.concatenate(([1.0], survival_after[:-1])) - survival_after
    total_mass_check = float(masses.sum() + tail_defect)
    logger.debug(
        f"Weighted KM: {len(e_flat)} residuals, {len(jump_points)} jump points, "
        f"tail defect {tail_defect:.4g}"
    )
    return WeightedSurvival(
        jump_points=jump_points,
        survival_after=survival_after,
        total_mass_check=total_mass_check,
        tail_defect=tail_defect,
    )


def conditional_tail_means(surv: WeightedSurvival, cutpoints: np.ndarray) -> np.ndarray:
    """
    Vectorized conditional means ∫_{(c,∞)} u dF̂ / ∫_{(c,∞)} dF̂.

    The mean is taken over the jump masses strictly above each cutpoint c; when
    that mass is at most EPS_TAIL (c beyond the last jump, or only tail defect
    left) the cutpoint itself is returned.
    """
    c = np.asarray(cutpoints, dtype=float)
    masses = surv.jump_masses
    suffix_mass = np.concatenate((np.cumsum(masses[::-1])[::-1], [0.0]))
    suffix_moment = np.concatenate((np.cumsum((surv.jump_points * masses)[::-1])[::-1], [0.0]))

    idx = np.searchsorted(surv.jump_points, c, side="right")
    mass = suffix_mass[idx]
    moment = suffix_moment[idx]
    safe = mass > EPS_TAIL
    return np.where(safe, moment / np.where(safe, mass, 1.0), c)


def conditional_tail_mean(surv: WeightedSurvival, cutpoint: float) -> float:
    """Conditional mean of the residual law beyond `cutpoint` (see conditional_tail_means)."""
    return float(conditional_tail_means(surv, np.array([cutpoint]))[0])


def impute_responses(
    dataset: ClusteredDataset,
    beta_b: np.ndarray,
    surv: WeightedSurvival,
) -> ImputedResponses:
    """
    Weight-adjusted imputed responses at anchor b.

    Ŷ_ik = Y_ik when Δ_ik = 1, else E_F̂[e | e > e_ik(b)] + X_ik b.
    """
    arrays = dataset.arrays
    beta_b = np.asarray(beta_b, dtype=float)
    fitted = np.einsum("ikp,p->ik", arrays.X, beta_b)
    residuals = np.where(arrays.mask, arrays.y - fitted, 0.0)

    censored = arrays.mask & ~arrays.delta
    values = np.where(arrays.mask, arrays.y, 0.0)
    if np.any(censored):
        tail = conditional_tail_means(surv, residuals[censored])
        # Ŷ ≥ Y holds by construction; max guards against rounding only
        values[censored] = np.maximum(tail + fitted[censored], arrays.y[censored])
    return ImputedResponses(values=values, imputed_flags=censored)


def impute_at(
    dataset: ClusteredDataset,
    beta_b: np.ndarray,
    multipliers: Optional[np.ndarray] = None,
) -> Tuple[ImputedResponses, WeightedSurvival]:
    """Fit F̂ at e(b) with the dataset's weights and impute censored responses."""
    arrays = dataset.arrays
    residuals = compute_residuals(dataset, beta_b)
    surv = fit_weighted_km(
        residuals, arrays.delta, arrays.weights, multipliers=multipliers, mask=arrays.mask
    )
    return impute_responses(dataset, beta_b, surv), surv
