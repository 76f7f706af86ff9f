"""
Command-line entry point: `python -m viewcoupling <command> ...`.

Exit codes: 0 success, 2 bad input or config, 3 numerical failure, 1 anything else from the package.
"""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

try:
    from . import catalog, config, errors, models, schemas
    from .services import (
        inference_service,
        mixture_service,
        power_service,
        report_service,
        simulate_service,
        views_service,
    )
except ImportError:  # pragma: no cover
    import catalog, config, errors, models, schemas  # type: ignore
    from services import (  # type: ignore
        inference_service,
        mixture_service,
        power_service,
        report_service,
        simulate_service,
        views_service,
    )


logger = logging.getLogger(__name__)


# --- argument groups ---


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="KEY=VALUE config file; flags given on the command line win.")
    p.add_argument("--out", default=".", help="Output directory (default: current directory).")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="Worker count (default: MVI_THREADS, then all cores).")
    p.add_argument("--verbose", "-v", action="store_true", help="Debug logging.")
    p.add_argument("--structure", default=None, help="Covariance structure: EII, EEI or EEE.")
    p.add_argument("--em-restarts", type=int, default=None)
    p.add_argument("--em-max-iter", type=int, default=None)


def _add_input(p: argparse.ArgumentParser) -> None:
    p.add_argument("--id-col", default=None, help="Name of the ID column; views are inner-joined on it.")
    p.add_argument("--standardize", action="store_true", default=None, help="Scale every column to unit SD.")
    p.add_argument("--impute-mean", action="store_true", default=None, help="Fill missing cells with column means.")
    p.add_argument(
        "--max-missing",
        type=float,
        default=None,
        help="Drop features, then observations, whose missing share exceeds this fraction.",
    )


def _add_selection(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k-policy", default=None, help="fixed, BIC or AIC.")
    p.add_argument("--k-min", type=int, default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--min-k-two", action="store_true", default=None, help="Never select a single cluster.")


def _add_testing(p: argparse.ArgumentParser) -> None:
    p.add_argument("--B", "-B", dest="B", type=int, default=None, help="Permutation replicates (default: 200).")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--add-one", action="store_true", default=None, help="Use (1 + #{null >= obs}) / (B + 1).")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewcoupling",
        description="Test whether two data views cluster independently (pseudo likelihood ratio test).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("test", help="Independence test for two views.")
    p.add_argument("view1")
    p.add_argument("view2")
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    _add_common(p)
    _add_input(p)
    _add_selection(p)
    _add_testing(p)

    p = sub.add_parser("pairs", help="Independence test for every pair of two or more views.")
    p.add_argument("views", nargs="+")
    p.add_argument("--k1", type=int, default=None, help="K used for every view when k_policy=fixed.")
    _add_common(p)
    _add_input(p)
    _add_selection(p)
    _add_testing(p)

    p = sub.add_parser("fit", help="Fit one Gaussian mixture.")
    p.add_argument("view")
    p.add_argument("--k", type=int, default=None)
    _add_common(p)
    _add_input(p)
    _add_selection(p)

    p = sub.add_parser("simulate", help="Draw one coupled two-view dataset.")
    p.add_argument("--design", default=None, help="Mean catalog entry (see `catalog`).")
    p.add_argument("--means-file", default=None, help="CSV of custom means: a view column (1 or 2), one row per component.")
    p.add_argument("--family", default=None, help="SPHERICAL, DENSE_SHARED, DENSE_DIAG or STUDENT_T.")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--df", type=float, default=None, help="Student-t degrees of freedom.")
    _add_common(p)

    p = sub.add_parser("power", help="Monte-Carlo power / Type I error study.")
    p.add_argument("--designs", default=None, help="Comma-separated catalog entries.")
    p.add_argument("--family", default=None)
    p.add_argument("--ns", default=None)
    p.add_argument("--sigmas", default=None, help="Comma-separated; default depends on the design.")
    p.add_argument("--deltas", default=None)
    p.add_argument("--k-fits", default=None, help="Comma-separated K values or BIC; default is the true K.")
    p.add_argument("--methods", default=None, help="Any of PLRT,GTestChiSq,GTestPerm,ARIPerm.")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--B", "-B", dest="B", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--df", type=float, default=None)
    p.add_argument("--full-scale", action="store_true", default=None, help="reps=2000, B=200.")
    _add_common(p)

    p = sub.add_parser("plot-data", help="Split power.csv into one series file per (sigma, n) panel.")
    p.add_argument("power_csv")
    p.add_argument("--out", default=".")
    p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("catalog", help="Write every mean catalog entry to catalog.json.")
    p.add_argument("--out", default=".")
    p.add_argument("--verbose", "-v", action="store_true")
    return parser


_NON_CONFIG = {"command", "config", "out", "verbose", "view1", "view2", "views", "view", "power_csv"}


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k not in _NON_CONFIG and v is not None}


def _load_views(paths: Sequence[str], cfg: schemas.InputConfig) -> views_service.PreparedViews:
    return views_service.prepare_views(
        paths,
        id_col=cfg.id_col,
        standardize_columns=cfg.standardize,
        impute_mean=cfg.impute_mean,
        max_missing=cfg.max_missing,
    )


def _provenance(prepared: views_service.PreparedViews, cfg: schemas.RunConfig) -> Dict[str, Any]:
    return {**prepared.provenance, "config": cfg.model_dump(exclude={"threads"})}


# --- commands ---


def cmd_test(args: argparse.Namespace) -> int:
    cfg = schemas.load_run_config(schemas.TestConfig, args.config, _overrides(args))
    prepared = _load_views([args.view1, args.view2], cfg)
    options = cfg.independence_options(config.resolve_threads(cfg.threads))
    report = inference_service.test_independence(prepared.views[0], prepared.views[1], options)

    out = Path(args.out)
    doc = report_service.result_document(report, cfg.alpha, provenance=_provenance(prepared, cfg))
    report_service.write_json(doc, out / "result.json")
    report_service.write_text(report_service.summary_text(report, cfg.alpha), out / "result.txt")
    logger.info(f"PLRT p-value {report.plrt.p_value:.4g} (statistic {report.plrt.statistic:.6g})")
    return 0


def cmd_pairs(args: argparse.Namespace) -> int:
    cfg = schemas.load_run_config(schemas.PairsConfig, args.config, _overrides(args))
    if len(args.views) < 2:
        raise errors.InputError("pairs needs at least two view files")
    prepared = _load_views(args.views, cfg)
    options = cfg.independence_options(config.resolve_threads(cfg.threads))
    reports = inference_service.test_all_pairs(prepared.views, options)

    out = Path(args.out)
    provenance = _provenance(prepared, cfg)
    docs = [
        report_service.result_document(r, cfg.alpha, command="pairs", provenance=provenance) for r in reports
    ]
    report_service.write_json({"schema_version": 1, "command": "pairs", "results": docs}, out / "pairs.json")
    report_service.write_csv(report_service.pairs_frame(reports, cfg.alpha), out / "pairs.csv")
    return 0


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = schemas.load_run_config(schemas.FitConfig, args.config, _overrides(args))
    prepared = _load_views([args.view], cfg)
    view = prepared.views[0]
    em = cfg.em_options()
    selection: Optional[Dict[int, Optional[float]]] = None
    if cfg.k_policy == "fixed":
        fit = mixture_service.fit_mixture(view, int(cfg.k), cfg.structure, em)
    else:
        sel = mixture_service.select_k_with_trace(
            view, (cfg.k_min, cfg.k_max), cfg.structure, cfg.k_policy, em, min_k_two=cfg.min_k_two
        )
        fit, selection = sel.fit, sel.trace
    logger.info(f"{view.view_id}: K={fit.K}, loglik={fit.loglik:.6g}, BIC={fit.bic:.6g}")
    doc = report_service.fit_document(fit, view.view_id, selection, _provenance(prepared, cfg))
    report_service.write_json(doc, Path(args.out) / "fit.json")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = schemas.load_run_config(schemas.SimulateConfig, args.config, _overrides(args))
    entry = catalog.load_means_csv(cfg.means_file) if cfg.means_file else catalog.get_entry(cfg.design)
    design = models.SimDesign(
        coupling=models.CouplingDesign(entry.K, cfg.delta),
        means=entry,
        family=catalog.family_for(cfg.family, sigma=cfg.sigma, df=cfg.df),
        n=cfg.n,
        seed=cfg.seed,
    )
    view1, view2, z1, z2 = simulate_service.sample_views(design)
    out = Path(args.out)
    views_service.write_view_csv(view1, out / "view1.csv")
    views_service.write_view_csv(view2, out / "view2.csv")
    labels = pd.DataFrame({"z1": z1.labels, "z2": z2.labels})
    report_service.write_csv(labels, out / "labels.csv")
    logger.info(f"Simulated {entry.id} ({cfg.family}) n={cfg.n} delta={cfg.delta:g} into {out}")
    return 0


def cmd_power(args: argparse.Namespace) -> int:
    cfg = schemas.load_run_config(schemas.PowerConfig, args.config, _overrides(args))
    cells = power_service.build_grid(
        cfg.designs,
        cfg.ns,
        cfg.deltas,
        cfg.k_fits,
        sigmas=cfg.sigmas or None,
        family=cfg.family,
        df=cfg.df,
    )
    table = power_service.run_power_study(
        cells,
        reps=cfg.reps,
        B=cfg.B,
        alpha=cfg.alpha,
        methods=cfg.methods,
        seed=cfg.seed,
        jobs=config.resolve_threads(cfg.threads),
        em_opts=cfg.em_options(),
        eg_opts=cfg.eg_options(),
    )
    out = Path(args.out)
    power_service.write_power_csv(table, out / "power.csv")
    report_service.write_json(table.to_document(), out / "power.json")
    return 0


def cmd_plot_data(args: argparse.Namespace) -> int:
    frame = power_service.read_power_csv(args.power_csv)
    written = power_service.write_plot_data(frame, args.out)
    logger.info(f"Wrote {len(written)} panel file(s) to {args.out}")
    return 0


def cmd_catalog(args: argparse.Namespace) -> int:
    report_service.write_json(
        {"schema_version": 1, "entries": catalog.catalog_document()},
        Path(args.out) / "catalog.json",
    )
    return 0


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "test": cmd_test,
    "pairs": cmd_pairs,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "plot-data": cmd_plot_data,
    "catalog": cmd_catalog,
}


def main(argv: Optional[List[str]] = None) -> int:
    config.load_env_file()
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=config.resolve_log_level(bool(getattr(args, "verbose", False))))

    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        logger.error(f"Invalid configuration: {exc}")
        return 2
    except errors.ViewCouplingError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code
    except (KeyError, ValueError) as exc:
        # Unknown catalog ids and rejected option values.
        logger.error(f"Invalid input: {exc}")
        return 2
    except np.linalg.LinAlgError as exc:
        logger.error(f"Numerical failure: {exc}")
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
