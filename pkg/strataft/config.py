"""
Run Configuration for strataft

Run configuration files are flat YAML mappings validated with a JSON schema.
CLI flags override file values; the merged mapping is turned into the typed
configuration objects of the estimation modules.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from jsonschema import Draft202012Validator

from strataft.data_loader import load_yaml_config, resolve_scenario_path
from strataft.exceptions import ConfigError
from strataft.pgee_solver import PenaltyFamily, PenaltySpec, SolverConfig
from strataft.simulation.study import RULES, MethodSpec, SimulationScenario, default_methods
from strataft.variance import MultiplierLaw, ResampleConfig
from strataft.working_correlation import CorrelationKind

logger = logging.getLogger(__name__)

DEFAULTS: Dict[str, Any] = {
    "penalty": "none",
    "lambda": 0.0,
    "scad_a": 3.7,
    "corstr": "exchangeable",
    "exempt": [],
    "gamma": 1e-3,
    "zeta": 1e-6,
    "max_inner": 50,
    "max_outer": 100,
    "coef_cutoff": 1e-3,
    "penalty_n": "sampled",
    "init": "wols",
    "folds": 5,
    "lambda_min_ratio": 1e-3,
    "n_lambda": 50,
    "lambdas": None,
    "rule": "cv",
    "seed": None,
    "replicates": 200,
    "level": 0.95,
    "multiplier": "exp",
    "workers": 1,
}

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}
_POSITIVE_INT = {"type": "integer", "minimum": 1}

RUN_CONFIG_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "data": {"type": "string"},
        "strata_counts": {"type": "string"},
        "penalty": {"enum": [f.value for f in PenaltyFamily]},
        "lambda": {"type": "number", "minimum": 0},
        "scad_a": {"type": "number", "exclusiveMinimum": 2},
        "corstr": {"enum": ["independence", "exchangeable", "unstructured", "wi", "ind", "ex", "exch", "un"]},
        "exempt": {
            "oneOf": [{"type": "string"}, {"type": "array", "items": {"type": "string"}}],
        },
        "gamma": _POSITIVE,
        "zeta": _POSITIVE,
        "max_inner": _POSITIVE_INT,
        "max_outer": _POSITIVE_INT,
        "coef_cutoff": _POSITIVE,
        "penalty_n": {"enum": ["sampled", "cohort"]},
        "init": {"type": "string"},
        "folds": {"type": "integer", "minimum": 2},
        "lambda_min_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "n_lambda": _POSITIVE_INT,
        "lambdas": {
            "oneOf": [
                {"type": "null"},
                {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
            ]
        },
        "rule": {"enum": ["cv", "1se"]},
        "seed": {"type": ["integer", "null"], "minimum": 0},
        "replicates": {"type": "integer", "minimum": 2},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "multiplier": {"enum": [law.value for law in MultiplierLaw]},
        "workers": _POSITIVE_INT,
    },
}

METHODS_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "structures": {
            "type": "array",
            "items": {"enum": ["independence", "exchangeable", "unstructured", "wi", "ex", "un"]},
            "minItems": 1,
        },
        "weighted": {"type": "array", "items": {"type": "boolean"}, "minItems": 1},
        "rules": {"type": "array", "items": {"enum": list(RULES)}, "minItems": 1},
        "penalty": {"enum": ["lasso", "scad"]},
    },
}


def _validate(values: Mapping[str, Any], schema: Dict[str, Any], source: str) -> None:
    """Report every schema violation at once."""
    errors = sorted(Draft202012Validator(schema).iter_errors(dict(values)), key=lambda e: list(e.path))
    if errors:
        lines = []
        for e in errors:
            where = ".".join(str(p) for p in e.path) or "(top level)"
            lines.append(f"{where}: {e.message}")
        raise ConfigError(f"Invalid configuration in {source}:\n  " + "\n  ".join(lines))


def load_run_config(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    """
    Load and validate a run configuration file.

    Returns:
        Validated mapping (empty when path is None)

    Raises:
        DataLoadError: If the file is missing or not valid YAML
        ConfigError: On unknown keys or out-of-range values
    """
    if path is None:
        return {}
    values = load_yaml_config(path)
    _validate(values, RUN_CONFIG_SCHEMA, str(path))
    return values


def merge_config(file_values: Mapping[str, Any], flags: Mapping[str, Any]) -> Dict[str, Any]:
    """Defaults, then file values, then every flag that was given (not None)."""
    merged = dict(DEFAULTS)
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None and k in RUN_CONFIG_SCHEMA["properties"]})
    _validate({k: v for k, v in merged.items() if k in RUN_CONFIG_SCHEMA["properties"]}, RUN_CONFIG_SCHEMA, "merged flags")
    return merged


def resolve_seed(seed: Optional[int], fallback: int = 0) -> int:
    """
    An explicit seed, else STRATAFT_SEED (a .env file is honored), else `fallback`.

    Raises:
        ConfigError: If STRATAFT_SEED is not a non-negative integer
    """
    if seed is not None:
        return int(seed)
    load_dotenv()
    raw = os.getenv("STRATAFT_SEED")
    if raw is None or raw.strip() == "":
        return fallback
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"STRATAFT_SEED must be an integer, got {raw!r}")
    if value < 0:
        raise ConfigError(f"STRATAFT_SEED must be non-negative, got {value}")
    return value


def parse_name_list(value: Union[None, str, Sequence[str]]) -> List[str]:
    if value is None:
        return []
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    return [str(v).strip() for v in value]


def parse_float_list(value: Union[None, str, Sequence[float]]) -> Optional[List[float]]:
    if value is None:
        return None
    if isinstance(value, str):
        try:
            return [float(v) for v in value.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"Cannot parse λ list {value!r}")
    return [float(v) for v in value]


def exempt_mask(names: Sequence[str], covariate_names: Sequence[str]) -> Optional[Tuple[bool, ...]]:
    """
    Boolean mask of never-penalized covariates.

    Raises:
        ConfigError: If a name is not a covariate column
    """
    if not names:
        return None
    unknown = [n for n in names if n not in covariate_names]
    if unknown:
        raise ConfigError(f"Exempt covariates not in data: {unknown}. Columns: {list(covariate_names)}")
    chosen = set(names)
    return tuple(n in chosen for n in covariate_names)


def build_penalty(cfg: Mapping[str, Any], covariate_names: Sequence[str]) -> PenaltySpec:
    return PenaltySpec(
        family=PenaltyFamily(cfg["penalty"]),
        lam=float(cfg["lambda"]),
        a=float(cfg["scad_a"]),
        exempt_mask=exempt_mask(parse_name_list(cfg.get("exempt")), covariate_names),
    )


def build_solver(cfg: Mapping[str, Any]) -> SolverConfig:
    return SolverConfig(
        zeta=float(cfg["zeta"]),
        gamma=float(cfg["gamma"]),
        max_inner=int(cfg["max_inner"]),
        max_outer=int(cfg["max_outer"]),
        coef_cutoff=float(cfg["coef_cutoff"]),
        penalty_n=str(cfg["penalty_n"]),
    )


def build_resample(cfg: Mapping[str, Any], seed: int) -> ResampleConfig:
    return ResampleConfig(
        B=int(cfg["replicates"]),
        law=MultiplierLaw(cfg["multiplier"]),
        seed=seed,
        level=float(cfg["level"]),
        workers=int(cfg["workers"]),
    )


def build_structure(cfg: Mapping[str, Any]) -> CorrelationKind:
    try:
        return CorrelationKind.parse(cfg["corstr"])
    except ValueError:
        raise ConfigError(f"Unknown working correlation {cfg['corstr']!r}")


def build_methods(values: Optional[Mapping[str, Any]]) -> List[MethodSpec]:
    """Cartesian product of weightings, structures and rules (default: weighted and unweighted EX)."""
    if not values:
        return default_methods()
    _validate(values, METHODS_SCHEMA, "methods")
    family = PenaltyFamily(values.get("penalty", "scad"))
    return [
        MethodSpec(weighted=w, structure=CorrelationKind.parse(s), rule=rule, family=family)
        for s in values.get("structures", ["exchangeable"])
        for w in values.get("weighted", [True, False])
        for rule in values.get("rules", list(RULES))
    ]


def load_scenario(
    name_or_path: Union[str, Path],
    overrides: Optional[Mapping[str, Any]] = None,
) -> Tuple[SimulationScenario, List[MethodSpec]]:
    """
    Load a scenario file (path or bundled name) and its method list.

    Args:
        name_or_path: Scenario YAML path, or a bundled scenario name
        overrides: Scenario fields from flags (None values are ignored)

    Raises:
        DataLoadError: If the scenario cannot be found or parsed
        ConfigError: On unknown keys or invalid values
    """
    path = resolve_scenario_path(name_or_path)
    values = load_yaml_config(path)
    methods = build_methods(values.pop("methods", None))
    values.setdefault("name", path.stem)
    for key in ("beta_true", "inclusion_probs"):
        if key in values and values[key] is not None:
            values[key] = tuple(np.asarray(values[key], dtype=float).tolist())
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    scenario = SimulationScenario.from_mapping(values)
    logger.info(f"Loaded scenario {scenario.name} ({len(methods)} methods) from {path}")
    return scenario, methods
