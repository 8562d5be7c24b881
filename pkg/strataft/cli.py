"""
Command-line interface for strataft

Subcommands:
    validate  - run the dataset quality gates and print the report
    fit       - penalized weighted estimation at a fixed λ
    select    - stratified cross-validation over a λ grid and refit
    variance  - multiplier-resampling standard errors and Wald intervals
    simulate  - Monte Carlo study from a scenario file
    km        - weighted pooled Kaplan-Meier curve of the residuals at β

Exit codes: 0 success, 1 input/config error, 2 non-convergence, 3 numeric failure.
"""

import argparse
import dataclasses
import logging
import sys
from typing import Any, Dict, Optional, Sequence

import numpy as np
import pandas as pd

from strataft import __version__
from strataft.config import (
    build_penalty,
    build_resample,
    build_solver,
    build_structure,
    load_run_config,
    load_scenario,
    merge_config,
    parse_float_list,
    resolve_seed,
)
from strataft.data_loader import list_bundled_scenarios, load_clustered_csv, load_coefficients
from strataft.data_model import ClusteredDataset
from strataft.exceptions import (
    ConfigError,
    DataLoadError,
    DataQualityError,
    DesignError,
    NonConvergenceError,
    SchemaValidationError,
    StratAftError,
)
from strataft.export_logic import km_frame, to_json, write_json, write_study, write_table
from strataft.pgee_solver import FitResult, PenaltyFamily, fit
from strataft.quality_gates import ensure_valid, validate_dataset
from strataft.simulation.study import run_study
from strataft.tuning import CvCurve, cv_curve, default_lambda_grid, lambda_max, make_folds
from strataft.variance import resample_variance
from strataft.weighted_km import compute_residuals, fit_weighted_km

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGENCE = 2
EXIT_NUMERIC = 3

INPUT_ERRORS = (DataLoadError, SchemaValidationError, DataQualityError, ConfigError, DesignError)


# =============================================================================
# Shared helpers
# =============================================================================


def _emit_summary(summary: Dict[str, Any], path: Optional[str]) -> None:
    """Run summaries go to a file when asked, else to stderr so stdout stays CSV."""
    if path:
        write_json(summary, path)
    else:
        sys.stderr.write(to_json(summary) + "\n")


def _load(args: argparse.Namespace, cfg: Dict[str, Any]) -> ClusteredDataset:
    data = args.data or cfg.get("data")
    if not data:
        raise ConfigError("No data file given (--data or 'data' in the config file)")
    dataset = load_clustered_csv(data, args.strata_counts or cfg.get("strata_counts"))
    ensure_valid(dataset, folds=int(cfg.get("folds", 5)))
    return dataset


def _run_config(args: argparse.Namespace) -> Dict[str, Any]:
    flags = {k.replace("-", "_"): v for k, v in vars(args).items()}
    if "lambdas" in flags:
        flags["lambdas"] = parse_float_list(flags["lambdas"])
    return merge_config(load_run_config(args.config), flags)


def _initial(init: str, dataset: ClusteredDataset) -> Optional[np.ndarray]:
    if init == "wols":
        return None
    if init == "zeros":
        return np.zeros(dataset.p)
    return load_coefficients(init, dataset.covariate_names)


def _selection_family(cfg: Dict[str, Any]) -> Dict[str, Any]:
    if cfg["penalty"] == PenaltyFamily.NONE.value:
        logger.warning("Tuning needs a penalty; using SCAD")
        return {**cfg, "penalty": PenaltyFamily.SCAD.value}
    return cfg


def _tune(dataset: ClusteredDataset, cfg: Dict[str, Any], seed: int) -> CvCurve:
    spec = build_penalty(cfg, dataset.covariate_names)
    solver = build_solver(cfg)
    structure = build_structure(cfg)
    if cfg.get("lambdas"):
        grid = np.asarray(cfg["lambdas"], dtype=float)
    else:
        lam_max = lambda_max(dataset, spec, solver, structure, _initial(cfg["init"], dataset))
        grid = default_lambda_grid(lam_max, int(cfg["n_lambda"]), float(cfg["lambda_min_ratio"]))
    plan = make_folds(dataset, int(cfg["folds"]), seed)
    return cv_curve(dataset, plan, grid, spec, solver, structure, workers=1)


def _fit(dataset: ClusteredDataset, cfg: Dict[str, Any]) -> FitResult:
    return fit(
        dataset,
        build_penalty(cfg, dataset.covariate_names),
        build_solver(cfg),
        build_structure(cfg),
        _initial(cfg["init"], dataset),
    )


# =============================================================================
# Subcommands
# =============================================================================


def cmd_validate(args: argparse.Namespace) -> int:
    dataset = load_clustered_csv(args.data, args.strata_counts)
    report = validate_dataset(dataset, folds=args.folds)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_INPUT


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    dataset = _load(args, cfg)
    result = _fit(dataset, cfg)
    write_table(result.coefficient_table(), args.out)
    _emit_summary(result.summary(), args.summary)
    return EXIT_OK if result.converged else EXIT_NONCONVERGENCE


def cmd_select(args: argparse.Namespace) -> int:
    cfg = _selection_family(_run_config(args))
    seed = resolve_seed(cfg["seed"])
    dataset = _load(args, cfg)
    curve = _tune(dataset, cfg, seed)
    write_table(curve.to_frame(), args.out)

    lam = curve.selected(cfg["rule"])
    result = _fit(dataset, {**cfg, "lambda": lam})
    if args.model_out:
        write_table(result.coefficient_table(), args.model_out)
    _emit_summary(
        {
            "seed": seed,
            "rule": cfg["rule"],
            "lambda_cv": curve.lambda_cv,
            "lambda_1se": curve.lambda_1se,
            "se_at_cvmin": curve.se_at_cvmin,
            "selected_lambda": lam,
            "fit": result.summary(),
            "coefficients": dict(zip(result.covariate_names, result.beta.tolist())),
        },
        args.summary,
    )
    return EXIT_OK if result.converged else EXIT_NONCONVERGENCE


def cmd_variance(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    seed = resolve_seed(cfg["seed"])
    dataset = _load(args, cfg)
    lam = float(cfg["lambda"])
    if args.tune:
        cfg = _selection_family(cfg)
        lam = _tune(dataset, cfg, seed).selected(cfg["rule"])
    point = _fit(dataset, {**cfg, "lambda": lam})
    if not point.converged:
        logger.error("Point fit did not converge; no variance computed")
        write_table(point.coefficient_table(), args.out)
        return EXIT_NONCONVERGENCE

    result = resample_variance(
        dataset,
        point,
        build_resample(cfg, seed),
        build_solver(cfg),
        build_structure(cfg),
        progress=args.progress,
    )
    table = result.to_frame()
    table["B_effective"] = result.B_effective
    write_table(table, args.out)
    _emit_summary({"seed": seed, "lambda": lam, "fit": point.summary(), **result.summary()}, args.summary)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    overrides = {"replications": args.reps}
    scenario, methods = load_scenario(args.scenario, overrides)
    scenario = dataclasses.replace(scenario, seed=resolve_seed(args.seed, fallback=scenario.seed))
    result = run_study(
        scenario,
        methods,
        workers=args.workers,
        progress=args.progress,
        with_variance=not args.no_variance,
    )
    if args.out:
        write_study(result, args.out)
    else:
        write_table(result.selection)
        write_table(result.estimation)
    return EXIT_OK


def cmd_km(args: argparse.Namespace) -> int:
    dataset = load_clustered_csv(args.data, args.strata_counts)
    ensure_valid(dataset)
    beta = np.zeros(dataset.p) if args.beta is None else load_coefficients(args.beta, dataset.covariate_names)
    arrays = dataset.arrays
    surv = fit_weighted_km(compute_residuals(dataset, beta), arrays.delta, arrays.weights, mask=arrays.mask)
    write_table(km_frame(surv), args.out)
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================


def _add_data_args(p: argparse.ArgumentParser, required: bool = False) -> None:
    p.add_argument("--data", required=required, help="Member-level CSV")
    p.add_argument("--strata-counts", dest="strata_counts", help="Per-stratum design counts CSV")


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="Run configuration YAML (flags win)")
    p.add_argument("--penalty", choices=[f.value for f in PenaltyFamily])
    p.add_argument("--lambda", dest="lambda", type=float)
    p.add_argument("--scad-a", dest="scad_a", type=float)
    p.add_argument("--corstr", help="independence | exchangeable | unstructured")
    p.add_argument("--exempt", help="Comma-separated never-penalized covariates")
    p.add_argument("--gamma", type=float, help="Outer convergence tolerance")
    p.add_argument("--zeta", type=float, help="Penalty linearization guard")
    p.add_argument("--max-inner", dest="max_inner", type=int)
    p.add_argument("--max-outer", dest="max_outer", type=int)
    p.add_argument("--coef-cutoff", dest="coef_cutoff", type=float)
    p.add_argument("--penalty-n", dest="penalty_n", choices=["sampled", "cohort"])
    p.add_argument("--init", help="wols, zeros or a coefficient CSV")
    p.add_argument("--out", help="Table output path (stdout when omitted)")
    p.add_argument("--summary", help="JSON run summary path (stderr when omitted)")


def _add_tuning_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--folds", type=int)
    p.add_argument("--lambda-min-ratio", dest="lambda_min_ratio", type=float)
    p.add_argument("--n-lambda", dest="n_lambda", type=int)
    p.add_argument("--lambdas", help="Comma-separated λ grid")
    p.add_argument("--rule", choices=["cv", "1se"])
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="strataft",
        description="Penalized weighted estimation for clustered AFT models under stratified sampling.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="Run dataset quality gates")
    _add_data_args(p, required=True)
    p.add_argument("--folds", type=int, default=5)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("fit", help="Fit at a fixed λ")
    _add_data_args(p)
    _add_fit_args(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("select", help="Cross-validated λ selection and refit")
    _add_data_args(p)
    _add_fit_args(p)
    _add_tuning_args(p)
    p.add_argument("--model-out", dest="model_out", help="Coefficient table of the selected model")
    p.set_defaults(handler=cmd_select)

    p = sub.add_parser("variance", help="Multiplier-resampling standard errors")
    _add_data_args(p)
    _add_fit_args(p)
    _add_tuning_args(p)
    p.add_argument("--replicates", type=int)
    p.add_argument("--level", type=float)
    p.add_argument("--multiplier", choices=["exp", "twopoint"])
    p.add_argument("--workers", type=int)
    p.add_argument("--tune", action="store_true", help="Choose λ by cross-validation first")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(handler=cmd_variance)

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--scenario", default="default", help="Scenario YAML path or bundled name")
    p.add_argument("--reps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="Output directory (tables to stdout when omitted)")
    p.add_argument("--no-variance", dest="no_variance", action="store_true")
    p.add_argument("--progress", action="store_true")
    p.add_argument("--list", dest="list_scenarios", action="store_true", help="List bundled scenarios")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("km", help="Weighted Kaplan-Meier curve of the residuals")
    _add_data_args(p, required=True)
    p.add_argument("--beta", help="Coefficient CSV (zeros when omitted)")
    p.add_argument("--out", help="Output path (stdout when omitted)")
    p.set_defaults(handler=cmd_km)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    if getattr(args, "list_scenarios", False):
        try:
            print("\n".join(list_bundled_scenarios()))
        except DataLoadError as e:
            logger.error(str(e))
            return EXIT_INPUT
        return EXIT_OK

    try:
        return args.handler(args)
    except INPUT_ERRORS as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_INPUT
    except NonConvergenceError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if e.last_estimate is not None and getattr(args, "out", None):
            estimate = np.asarray(e.last_estimate, dtype=float)
            write_table(pd.DataFrame({"estimate": estimate}), args.out)
        return EXIT_NONCONVERGENCE
    except (StratAftError, np.linalg.LinAlgError, FloatingPointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        for note in getattr(e, "__notes__", []):
            logger.error(f"  {note}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
