"""
Output Writers for strataft

Contains functions for:
- Writing result tables as plain CSV (to a file or stdout)
- Writing run summaries as JSON documents
- Flattening datasets, survival curves and study results into tables

Every table written here has a reader in strataft.data_loader.
"""

import dataclasses
import json
import logging
import sys
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd

from strataft.data_model import ClusteredDataset
from strataft.simulation.study import StudyResult
from strataft.weighted_km import WeightedSurvival

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Path):
        return str(value)
    if dataclasses.is_dataclass(value):
        return dataclasses.asdict(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_table(df: pd.DataFrame, path: Optional[PathLike] = None) -> None:
    """
    Write a table as CSV with a one-line header.

    Args:
        df: Table to write
        path: Destination file; stdout when None
    """
    if path is None:
        df.to_csv(sys.stdout, index=False)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False)
    logger.info(f"Wrote {len(df)} rows to {path}")


def to_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, default=_json_default, allow_nan=True)


def write_json(obj: Any, path: Optional[PathLike] = None) -> None:
    """Write a JSON document to a file, or to stdout when path is None."""
    text = to_json(obj)
    if path is None:
        sys.stdout.write(text + "\n")
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")
    logger.info(f"Wrote summary to {path}")


def km_frame(surv: WeightedSurvival) -> pd.DataFrame:
    """(t, F̂(t)) at every jump point, with the jump mass and remaining survival."""
    return pd.DataFrame(
        {
            "t": surv.jump_points,
            "cdf": 1.0 - surv.survival_after,
            "survival": surv.survival_after,
            "mass": surv.jump_masses,
        }
    )


def dataset_to_frame(dataset: ClusteredDataset) -> pd.DataFrame:
    """
    Member-level table in the input CSV schema.

    Times are written on the original scale; covariates of members without
    them are left blank.
    """
    names = list(dataset.covariate_names) or [f"x{j + 1}" for j in range(dataset.p)]
    rows = []
    for cluster in dataset.clusters:
        for obs in cluster.members:
            row: Dict[str, Any] = {
                "cluster_id": cluster.id,
                "member_id": obs.member_id,
                "time": float(np.exp(obs.log_time)),
                "status": int(obs.event),
                "stratum": cluster.stratum,
                "sampled": int(cluster.sampled),
            }
            values = obs.covariates if obs.covariates is not None else [np.nan] * dataset.p
            row.update(dict(zip(names, map(float, values))))
            rows.append(row)
    return pd.DataFrame(rows)


def strata_counts_frame(dataset: ClusteredDataset) -> pd.DataFrame:
    counts = [dataset.strata_counts[s] for s in sorted(dataset.strata_counts)]
    if counts and all(sc.cohort_size is not None for sc in counts):
        return pd.DataFrame(
            {
                "stratum": [sc.stratum for sc in counts],
                "cohort_size": [sc.cohort_size for sc in counts],
                "sampled_size": [sc.sampled_size for sc in counts],
            }
        )
    return pd.DataFrame(
        {"stratum": [sc.stratum for sc in counts], "inclusion_prob": [sc.inclusion_fraction for sc in counts]}
    )


def write_dataset(dataset: ClusteredDataset, path: PathLike, strata_counts_path: Optional[PathLike] = None) -> None:
    """Write a dataset (and optionally its design counts) in the loader's schema."""
    write_table(dataset_to_frame(dataset), path)
    if strata_counts_path is not None:
        write_table(strata_counts_frame(dataset), strata_counts_path)


def study_summary(result: StudyResult) -> Dict[str, Any]:
    return {
        "scenario": dataclasses.asdict(result.scenario),
        "kappa": result.kappa,
        "log_kappa": float(np.log(result.kappa)),
        "mean_sampled_clusters": result.mean_sampled,
        "mean_censoring_rate": result.mean_censoring,
        "failed_replications": len(result.failures),
        "failures": list(result.failures),
    }


def write_study(result: StudyResult, out_dir: PathLike) -> Path:
    """
    Write a study's selection, estimation and per-replication tables plus a JSON summary.

    Returns:
        The output directory
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_table(result.selection, out_dir / "selection.csv")
    write_table(result.estimation, out_dir / "estimation.csv")
    write_table(result.raw, out_dir / "replications.csv")
    write_json(study_summary(result), out_dir / "summary.json")
    logger.info(f"✓ Study {result.scenario.name} written to {out_dir}")
    return out_dir
