"""
Selection and estimation metrics accumulated over simulation replications.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ReplicationRecord:
    """One method's outcome on one replication."""

    replication: int
    method: str
    beta_hat: np.ndarray
    model_error: float
    outer_iters: int
    converged: bool
    lam: float = 0.0
    se_target: float = float("nan")
    ci_lower: float = float("nan")
    ci_upper: float = float("nan")


@dataclass(frozen=True)
class SelectionMetrics:
    TP: float
    FP: float
    C_pct: float
    ME_median: float
    MSE_mean: float
    mean_outer_iters: float = float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EstimationMetrics:
    N_c: int
    BR_pct: float
    SE_a: float
    SE_e: float
    CP_pct: float

    def as_dict(self) -> dict:
        return asdict(self)


def model_error(beta_hat: np.ndarray, beta_true: np.ndarray, X: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    """Σ over design rows of {Σ_j (β̂_j - β0_j) X_j}² for X of shape (n, K, p)."""
    diff = np.einsum("ikp,p->ik", X, np.asarray(beta_hat) - np.asarray(beta_true))
    if mask is not None:
        diff = diff * mask
    return float(np.sum(diff ** 2))


def selection_counts(beta_hat: np.ndarray, beta_true: np.ndarray):
    """(true positives, false positives, exact support recovery)."""
    selected = np.asarray(beta_hat) != 0
    truth = np.asarray(beta_true) != 0
    tp = int(np.sum(selected & truth))
    fp = int(np.sum(selected & ~truth))
    return tp, fp, bool(np.array_equal(selected, truth))


def summarize_selection(records: Sequence[ReplicationRecord], beta_true: np.ndarray) -> SelectionMetrics:
    if not records:
        nan = float("nan")
        return SelectionMetrics(nan, nan, nan, nan, nan, nan)
    counts = [selection_counts(r.beta_hat, beta_true) for r in records]
    sq_err = [float(np.sum((r.beta_hat - beta_true) ** 2)) for r in records]
    return SelectionMetrics(
        TP=float(np.mean([c[0] for c in counts])),
        FP=float(np.mean([c[1] for c in counts])),
        C_pct=100.0 * float(np.mean([c[2] for c in counts])),
        ME_median=float(np.median([r.model_error for r in records])),
        MSE_mean=float(np.mean(sq_err)),
        mean_outer_iters=float(np.mean([r.outer_iters for r in records])),
    )


def summarize_estimation(
    records: Sequence[ReplicationRecord],
    beta_true: np.ndarray,
    target: int = 0,
) -> EstimationMetrics:
    """
    Bias ratio, average/empirical SE and CI coverage for one coefficient over
    the replications that selected it (β̂_target ≠ 0).
    """
    truth = float(beta_true[target])
    kept = [r for r in records if r.beta_hat[target] != 0]
    n_c = len(kept)
    if n_c == 0:
        nan = float("nan")
        return EstimationMetrics(0, nan, nan, nan, nan)

    estimates = np.array([r.beta_hat[target] for r in kept])
    ses = np.array([r.se_target for r in kept])
    lo = np.array([r.ci_lower for r in kept])
    hi = np.array([r.ci_upper for r in kept])
    has_ci = np.isfinite(lo) & np.isfinite(hi)

    bias_ratio = 100.0 * (estimates.mean() - truth) / truth if truth != 0 else float("nan")
    return EstimationMetrics(
        N_c=n_c,
        BR_pct=float(bias_ratio),
        SE_a=float(np.mean(ses[np.isfinite(ses)])) if np.any(np.isfinite(ses)) else float("nan"),
        SE_e=float(np.std(estimates, ddof=1)) if n_c > 1 else float("nan"),
        CP_pct=100.0 * float(np.mean((lo[has_ci] <= truth) & (truth <= hi[has_ci])))
        if np.any(has_ci)
        else float("nan"),
    )
