"""
Data Loading Module for strataft

CSV ingestion of clustered survival data and per-stratum design counts, with
schema validation, row diagnostics and environment variable support for the
bundled configuration directory.

CSV schema (one row per cluster member):
    cluster_id, member_id, time, status, stratum[, sampled], <covariates...>
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import yaml

from strataft.data_model import (
    Cluster,
    ClusteredDataset,
    Observation,
    StratumCount,
    derive_strata_counts,
)
from strataft.exceptions import DataLoadError, SchemaValidationError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ["cluster_id", "member_id", "time", "status", "stratum"]
OPTIONAL_COLUMNS = ["sampled"]

# Row diagnostics listed before truncating the error message
MAX_ROW_DIAGNOSTICS = 20


def get_data_dir() -> Path:
    """
    Get data directory from environment variable or default.

    Returns:
        Path to data directory

    Raises:
        DataLoadError: If the directory does not exist
    """
    data_dir = Path(os.getenv("STRATAFT_DATA_DIR", "./data"))

    if not data_dir.exists():
        raise DataLoadError(
            f"Data directory not found: {data_dir}. "
            f"Set STRATAFT_DATA_DIR environment variable or ensure ./data exists."
        )

    return data_dir


def load_yaml_config(file_path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a YAML mapping.

    Raises:
        DataLoadError: If file not found, invalid YAML or not a mapping
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise DataLoadError(f"Config file not found: {file_path}")

    try:
        with open(file_path) as f:
            config = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise DataLoadError(f"Invalid YAML in {file_path}: {e}")
    except OSError as e:
        raise DataLoadError(f"Failed to read {file_path}: {e}")

    if config is None:
        return {}
    if not isinstance(config, dict):
        raise DataLoadError(f"{file_path} must contain a key/value mapping")

    logger.info(f"Loaded config from {file_path}")
    return config


def resolve_scenario_path(name_or_path: Union[str, Path]) -> Path:
    """A scenario file path, or the bundled scenario of that name under data/config/scenarios."""
    candidate = Path(name_or_path)
    if candidate.exists():
        return candidate
    bundled = get_data_dir() / "config" / "scenarios" / f"{candidate.stem}.yaml"
    if not bundled.exists():
        raise DataLoadError(f"Scenario not found as a file or bundled scenario: {name_or_path}")
    return bundled


def list_bundled_scenarios() -> List[str]:
    scenario_dir = get_data_dir() / "config" / "scenarios"
    return sorted(p.stem for p in scenario_dir.glob("*.yaml"))


def validate_schema(df: pd.DataFrame, required_columns: List[str], file_name: str) -> None:
    """
    Validate that DataFrame contains all required columns.

    Raises:
        SchemaValidationError: If required columns are missing
    """
    missing_columns = set(required_columns) - set(df.columns)

    if missing_columns:
        raise SchemaValidationError(
            f"{file_name} missing required columns: {sorted(missing_columns)}. "
            f"Found columns: {sorted(df.columns)}"
        )


def _read_csv(file_path: Path) -> pd.DataFrame:
    if not file_path.exists():
        raise DataLoadError(f"Required file not found: {file_path}")
    try:
        df = pd.read_csv(file_path, dtype=str, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataLoadError(f"{file_path} is empty")
    except Exception as e:
        raise DataLoadError(f"Failed to read {file_path}: {e}")
    if df.empty:
        raise DataLoadError(f"{file_path} has a header but no rows")
    df.columns = [c.strip() for c in df.columns]
    return df


def _raise_row_problems(problems: List[str], file_name: str) -> None:
    if not problems:
        return
    shown = problems[:MAX_ROW_DIAGNOSTICS]
    more = len(problems) - len(shown)
    suffix = f"\n  ... and {more} more" if more > 0 else ""
    raise SchemaValidationError(
        f"{file_name}: {len(problems)} invalid rows\n  " + "\n  ".join(shown) + suffix
    )


def _check_rows(df: pd.DataFrame, covariates: Sequence[str], file_name: str) -> Dict[str, pd.Series]:
    """Parse typed columns; every problem is reported with its CSV line number."""
    line = df.index.to_series() + 2
    problems: List[str] = []

    time = pd.to_numeric(df["time"], errors="coerce")
    bad_time = ~np.isfinite(time) | (time <= 0)
    problems += [f"line {n}: time {v!r} is not a positive finite number" for n, v in zip(line[bad_time], df["time"][bad_time])]

    status = pd.to_numeric(df["status"], errors="coerce")
    bad_status = ~status.isin([0, 1])
    problems += [f"line {n}: status {v!r} is not 0 or 1" for n, v in zip(line[bad_status], df["status"][bad_status])]

    stratum = pd.to_numeric(df["stratum"], errors="coerce")
    bad_stratum = stratum.isna() | (stratum != stratum.round()) | (stratum < 1)
    problems += [f"line {n}: stratum {v!r} is not a positive integer" for n, v in zip(line[bad_stratum], df["stratum"][bad_stratum])]

    if "sampled" in df.columns:
        sampled = pd.to_numeric(df["sampled"].fillna("1"), errors="coerce")
        bad_sampled = ~sampled.isin([0, 1])
        problems += [f"line {n}: sampled {v!r} is not 0 or 1" for n, v in zip(line[bad_sampled], df["sampled"][bad_sampled])]
    else:
        sampled = pd.Series(1, index=df.index)

    for col in covariates:
        values = pd.to_numeric(df[col], errors="coerce")
        bad = df[col].notna() & ~np.isfinite(values)
        problems += [f"line {n}: covariate {col} = {v!r} is not numeric" for n, v in zip(line[bad], df[col][bad])]

    missing_ids = df["cluster_id"].isna() | df["member_id"].isna()
    problems += [f"line {n}: cluster_id/member_id missing" for n in line[missing_ids]]

    _raise_row_problems(problems, file_name)
    return {"time": time, "status": status, "stratum": stratum.astype(int), "sampled": sampled.astype(int)}


def load_strata_counts(file_path: Union[str, Path]) -> Dict[int, StratumCount]:
    """
    Load per-stratum design counts.

    Accepts either `stratum, cohort_size, sampled_size` or
    `stratum, inclusion_prob` columns.

    Raises:
        DataLoadError: If file not found or empty
        SchemaValidationError: If neither column set is present or values are invalid
    """
    file_path = Path(file_path)
    df = _read_csv(file_path)
    validate_schema(df, ["stratum"], file_path.name)

    by_counts = {"cohort_size", "sampled_size"} <= set(df.columns)
    by_prob = "inclusion_prob" in df.columns
    if not (by_counts or by_prob):
        raise SchemaValidationError(
            f"{file_path.name} needs cohort_size and sampled_size, or inclusion_prob. "
            f"Found columns: {sorted(df.columns)}"
        )

    counts: Dict[int, StratumCount] = {}
    problems: List[str] = []
    for idx, row in df.iterrows():
        n = idx + 2
        try:
            stratum = int(row["stratum"])
            if by_counts:
                counts[stratum] = StratumCount(
                    stratum=stratum,
                    cohort_size=int(row["cohort_size"]),
                    sampled_size=int(row["sampled_size"]),
                )
            else:
                counts[stratum] = StratumCount(
                    stratum=stratum,
                    cohort_size=None,
                    sampled_size=0,
                    inclusion_prob=float(row["inclusion_prob"]),
                )
        except (TypeError, ValueError):
            problems.append(f"line {n}: cannot parse {dict(row)}")
    _raise_row_problems(problems, file_path.name)

    logger.info(f"Loaded design counts for {len(counts)} strata from {file_path}")
    return counts


def load_clustered_csv(
    file_path: Union[str, Path],
    strata_counts_path: Optional[Union[str, Path]] = None,
) -> ClusteredDataset:
    """
    Load clustered survival data with schema validation.

    Times are log-transformed at load. Blank covariates are allowed (and
    reported by the quality gates when they belong to a sampled cluster).

    Args:
        file_path: Member-level CSV
        strata_counts_path: Optional per-stratum design counts; when omitted
            the file is taken to hold the whole cohort

    Returns:
        ClusteredDataset with sampling weights

    Raises:
        DataLoadError: If file not found or empty
        SchemaValidationError: If columns are missing or rows are invalid
        DesignError: If design counts and sampling flags are inconsistent
    """
    file_path = Path(file_path)
    df = _read_csv(file_path)
    validate_schema(df, REQUIRED_COLUMNS, file_path.name)

    covariates = [c for c in df.columns if c not in REQUIRED_COLUMNS + OPTIONAL_COLUMNS]
    if not covariates:
        raise SchemaValidationError(f"{file_path.name} has no covariate columns")
    parsed = _check_rows(df, covariates, file_path.name)

    problems: List[str] = []
    for key in ("stratum", "sampled"):
        varying = parsed[key].groupby(df["cluster_id"]).nunique()
        problems += [f"cluster {cid}: {key} differs between members" for cid in varying[varying > 1].index]
    duplicated = df.duplicated(subset=["cluster_id", "member_id"], keep=False)
    problems += [f"line {n}: duplicate member {m} in cluster {c}" for n, c, m in zip(df.index[duplicated] + 2, df["cluster_id"][duplicated], df["member_id"][duplicated])]
    _raise_row_problems(problems, file_path.name)

    X = df[covariates].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    log_time = np.log(parsed["time"].to_numpy(dtype=float))
    status = parsed["status"].to_numpy(dtype=int)

    clusters = []
    for cid, group in df.groupby("cluster_id", sort=False):
        rows = group.index.to_numpy()
        members = tuple(
            Observation(
                log_time=float(log_time[r]),
                event=bool(status[r]),
                covariates=None if np.isnan(X[r]).any() else X[r],
                member_id=str(df["member_id"].iat[r]),
            )
            for r in rows
        )
        clusters.append(
            Cluster(
                id=str(cid),
                stratum=int(parsed["stratum"].iat[rows[0]]),
                sampled=bool(parsed["sampled"].iat[rows[0]]),
                members=members,
            )
        )

    if strata_counts_path is not None:
        strata_counts = load_strata_counts(strata_counts_path)
    else:
        strata_counts = derive_strata_counts(clusters)

    dataset = ClusteredDataset.from_clusters(
        clusters, p=len(covariates), strata_counts=strata_counts, covariate_names=covariates
    )
    logger.info(
        f"Loaded {len(clusters)} clusters ({dataset.n_sampled} sampled, {len(df)} members, "
        f"p = {len(covariates)}) from {file_path}"
    )
    return dataset


def load_coefficients(file_path: Union[str, Path], covariate_names: Sequence[str]) -> np.ndarray:
    """
    Load a coefficient table (name, estimate) as a vector ordered by `covariate_names`.

    Raises:
        SchemaValidationError: If columns are missing or names do not match
    """
    file_path = Path(file_path)
    df = _read_csv(file_path)
    validate_schema(df, ["name", "estimate"], file_path.name)

    estimates = pd.to_numeric(df["estimate"], errors="coerce")
    if estimates.isna().any():
        bad = (df.index[estimates.isna()] + 2).tolist()
        raise SchemaValidationError(f"{file_path.name}: non-numeric estimates on lines {bad}")

    table = dict(zip(df["name"], estimates))
    missing = [n for n in covariate_names if n not in table]
    extra = [n for n in table if n not in set(covariate_names)]
    if missing or extra:
        raise SchemaValidationError(
            f"{file_path.name} names do not match the data: missing {missing}, unexpected {extra}"
        )
    return np.array([table[n] for n in covariate_names], dtype=float)
