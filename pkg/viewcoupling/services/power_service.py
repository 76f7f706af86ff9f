from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

try:
    from .. import catalog, config, errors, models
except ImportError:  # pragma: no cover
    import catalog, config, errors, models  # type: ignore

try:
    from . import inference_service, mixture_service, simulate_service
except ImportError:  # pragma: no cover
    import inference_service, mixture_service, simulate_service  # type: ignore


logger = logging.getLogger(__name__)

METHODS: Tuple[str, ...] = ("PLRT", "GTestChiSq", "GTestPerm", "ARIPerm")

POWER_COLUMNS: List[str] = [
    "design_id",
    "n",
    "sigma",
    "delta",
    "K_fit",
    "method",
    "reps",
    "rejections",
    "power",
    "se",
]

# A cell is flagged when more than this share of its replicates failed.
FAILURE_FLAG_SHARE = 0.01


@dataclass(frozen=True)
class PowerCell:
    means_id: str
    n: int
    delta: float
    # int, or "BIC" for selection over [1, K_true + 3].
    K_fit: Union[int, str]
    family: str = "SPHERICAL"
    sigma: float = 1.0
    df: float = 3.0

    @property
    def design_id(self) -> str:
        if self.family.upper() == "SPHERICAL":
            return self.means_id
        return f"{self.means_id}+{self.family.upper()}"

    @property
    def sigma_value(self) -> float:
        return float(self.sigma) if self.family.upper() == "SPHERICAL" else float("nan")

    def sim_design(self, seed: int = 0) -> models.SimDesign:
        entry = catalog.get_entry(self.means_id)
        return models.SimDesign(
            coupling=models.CouplingDesign(entry.K, self.delta),
            means=entry,
            family=catalog.family_for(self.family, sigma=self.sigma, df=self.df),
            n=self.n,
            seed=seed,
        )


@dataclass(frozen=True)
class PowerRow:
    design_id: str
    n: int
    sigma: float
    delta: float
    K_fit: str
    method: str
    reps: int
    rejections: int
    power: float
    se: float


@dataclass
class PowerTable:
    rows: List[PowerRow]
    # Keyed by cell index.
    failures: Dict[int, int] = field(default_factory=dict)
    flagged: List[int] = field(default_factory=list)
    cells: List[PowerCell] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=POWER_COLUMNS)

    def to_document(self) -> Dict[str, Any]:
        return {
            "schema_version": 1,
            "rows": [asdict(r) for r in self.rows],
            "cells": [
                {
                    "index": i,
                    "design_id": c.design_id,
                    "n": c.n,
                    "sigma": c.sigma_value,
                    "delta": c.delta,
                    "K_fit": str(c.K_fit),
                    "failures": int(self.failures.get(i, 0)),
                    "flagged": i in self.flagged,
                }
                for i, c in enumerate(self.cells)
            ],
        }


def build_grid(
    means_ids: Sequence[str],
    ns: Sequence[int],
    deltas: Sequence[float],
    k_fits: Sequence[Union[int, str]] = (),
    *,
    sigmas: Optional[Sequence[float]] = None,
    family: str = "SPHERICAL",
    df: float = 3.0,
) -> List[PowerCell]:
    """Cartesian grid; an empty `k_fits` means the true K; sigmas default per catalog entry."""
    cells: List[PowerCell] = []
    spherical = family.upper() == "SPHERICAL"
    for means_id in means_ids:
        entry = catalog.get_entry(means_id)
        sigma_list = list(sigmas) if sigmas else list(catalog.DEFAULT_SIGMAS.get(entry.id, (1.0,)))
        if not spherical:
            sigma_list = [float("nan")]
        fits = list(k_fits) or [entry.K]
        for sigma in sigma_list:
            for n in ns:
                for k_fit in fits:
                    for delta in deltas:
                        cells.append(
                            PowerCell(
                                means_id=entry.id,
                                n=int(n),
                                delta=float(delta),
                                K_fit=_parse_k_fit(k_fit),
                                family=family.upper(),
                                sigma=float(sigma),
                                df=float(df),
                            )
                        )
    return cells


def _parse_k_fit(value: Union[int, str]) -> Union[int, str]:
    text = str(value).strip().upper()
    if text == "BIC":
        return "BIC"
    k = int(text)
    if k < 1:
        raise ValueError(f"K_fit must be >= 1 or BIC (got {value!r})")
    return k


def _replicate_seeds(seed: int, cell_index: int, rep: int) -> Tuple[np.random.SeedSequence, int, int]:
    data_ss, em_ss, perm_ss = np.random.SeedSequence([int(seed), int(cell_index), int(rep)]).spawn(3)
    return data_ss, int(em_ss.generate_state(1)[0]), int(perm_ss.generate_state(1)[0])


def _fit_for_cell(
    view: models.DataView,
    cell: PowerCell,
    K_true: int,
    structure: models.CovarianceStructure,
    em: config.EmOptions,
) -> models.MixtureFit:
    if cell.K_fit == "BIC":
        _, fit = mixture_service.select_k(view, (1, K_true + 3), structure, models.SelectionCriterion.BIC, em)
        return fit
    return mixture_service.fit_mixture(view, int(cell.K_fit), structure, em)


def run_replicate(
    cell: PowerCell,
    cell_index: int,
    rep: int,
    seed: int,
    B: int,
    alpha: float,
    methods: Sequence[str],
    em_opts: config.EmOptions,
    eg_opts: config.EgOptions,
) -> Dict[str, Optional[bool]]:
    """Rejection indicator per method for one replicate; None marks a failed method."""
    data_ss, em_seed, perm_seed = _replicate_seeds(seed, cell_index, rep)
    design = cell.sim_design()
    try:
        view1, view2, _, _ = simulate_service.sample_views(design, np.random.default_rng(data_ss))
        structure = design.family.fit_structure()
        em = replace(em_opts, seed=em_seed)
        fit1 = _fit_for_cell(view1, cell, design.coupling.K, structure, em)
        fit2 = _fit_for_cell(view2, cell, design.coupling.K, structure, em)
    except (errors.ViewCouplingError, np.linalg.LinAlgError) as exc:
        logger.debug(f"cell={cell_index} rep={rep} fit failed: {exc}")
        return {m: None for m in methods}

    out: Dict[str, Optional[bool]] = {}
    labels1 = mixture_service.hard_labels(fit1)
    labels2 = mixture_service.hard_labels(fit2)
    for method in methods:
        try:
            if method == "PLRT":
                p = inference_service.permutation_test_from_fits(fit1, fit2, B, perm_seed, eg_opts).p_value
            elif method == "GTestChiSq":
                _, _, p = inference_service.g_test(inference_service.contingency_table(labels1, labels2))
            elif method == "GTestPerm":
                p = inference_service.g_test_permutation(labels1, labels2, B, perm_seed).p_value
            elif method == "ARIPerm":
                p = inference_service.ari_permutation(labels1, labels2, B, perm_seed).p_value
            else:
                raise ValueError(f"Unknown method {method!r}")
        except (errors.ViewCouplingError, np.linalg.LinAlgError) as exc:
            logger.debug(f"cell={cell_index} rep={rep} {method} failed: {exc}")
            out[method] = None
            continue
        out[method] = bool(p <= alpha)
    return out


def run_power_study(
    cells: Sequence[PowerCell],
    reps: int = 500,
    B: int = 100,
    alpha: float = 0.05,
    methods: Sequence[str] = ("PLRT",),
    seed: int = 0,
    jobs: int = 1,
    em_opts: Optional[config.EmOptions] = None,
    eg_opts: Optional[config.EgOptions] = None,
) -> PowerTable:
    """
    Rejection rates per (cell, method) with binomial standard errors.

    Replicate (cell i, rep r) is seeded from (seed, i, r) alone, so the table does not depend on
    `jobs` and any subset of cells can be recomputed on its own.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"Unknown methods {unknown}; choose from {list(METHODS)}")
    if reps < 1 or B < 1:
        raise ValueError("reps and B must be >= 1")
    em_opts = em_opts or config.EmOptions()
    eg_opts = eg_opts or config.EgOptions()
    cells = list(cells)
    jobs_list = [(i, r) for i in range(len(cells)) for r in range(reps)]
    logger.info(f"Power study: {len(cells)} cell(s) x {reps} replicate(s), B={B}, jobs={jobs}")

    task = delayed(run_replicate)
    results = Parallel(n_jobs=max(1, int(jobs)))(
        task(cells[i], i, r, seed, B, alpha, list(methods), em_opts, eg_opts) for i, r in jobs_list
    )

    rows: List[PowerRow] = []
    failures: Dict[int, int] = {}
    flagged: List[int] = []
    for i, cell in enumerate(cells):
        outcomes = results[i * reps:(i + 1) * reps]
        failed = sum(1 for o in outcomes if any(v is None for v in o.values()))
        failures[i] = failed
        if failed > FAILURE_FLAG_SHARE * reps:
            flagged.append(i)
            logger.warning(f"Cell {cell.design_id} n={cell.n} delta={cell.delta}: {failed}/{reps} replicates failed")
        for method in methods:
            done = [o[method] for o in outcomes if o[method] is not None]
            m = len(done)
            rejections = int(sum(done))
            power = rejections / m if m else float("nan")
            se = math.sqrt(power * (1.0 - power) / m) if m else float("nan")
            rows.append(
                PowerRow(
                    design_id=cell.design_id,
                    n=cell.n,
                    sigma=cell.sigma_value,
                    delta=cell.delta,
                    K_fit=str(cell.K_fit),
                    method=method,
                    reps=m,
                    rejections=rejections,
                    power=power,
                    se=se,
                )
            )
    return PowerTable(rows=rows, failures=failures, flagged=flagged, cells=cells)


def write_power_csv(table: Union[PowerTable, pd.DataFrame], path: Union[str, Path]) -> Path:
    frame = table.to_frame() if isinstance(table, PowerTable) else table
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    return out


def read_power_csv(path: Union[str, Path]) -> pd.DataFrame:
    frame = pd.read_csv(path, dtype={"design_id": str, "K_fit": str, "method": str})
    missing = [c for c in POWER_COLUMNS if c not in frame.columns]
    if missing:
        raise errors.InputError(f"{path}: missing power table column(s) {missing}")
    return frame[POWER_COLUMNS]


PANEL_COLUMNS = ["design_id", "K_fit", "method", "delta", "reps", "rejections", "power", "se"]


def plot_panels(frame: pd.DataFrame) -> Dict[Tuple[float, int], pd.DataFrame]:
    """Split a power table into one delta-ordered series table per (sigma, n) panel."""
    panels: Dict[Tuple[float, int], pd.DataFrame] = {}
    for (sigma, n), group in frame.groupby(["sigma", "n"], dropna=False, sort=True):
        series = group.sort_values(["design_id", "K_fit", "method", "delta"], kind="mergesort")
        panels[(float(sigma), int(n))] = series[PANEL_COLUMNS].reset_index(drop=True)
    return panels


def unpivot_panels(panels: Dict[Tuple[float, int], pd.DataFrame]) -> pd.DataFrame:
    parts = []
    for (sigma, n), series in panels.items():
        part = series.copy()
        part.insert(1, "n", int(n))
        part.insert(2, "sigma", sigma)
        parts.append(part)
    if not parts:
        return pd.DataFrame(columns=POWER_COLUMNS)
    return pd.concat(parts, ignore_index=True)[POWER_COLUMNS]


def panel_filename(sigma: float, n: int) -> str:
    sigma_txt = "NA" if math.isnan(sigma) else f"{sigma:g}"
    return f"panel_sigma={sigma_txt}_n={n}.csv"


def write_plot_data(frame: pd.DataFrame, out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    for (sigma, n), series in plot_panels(frame).items():
        path = out / panel_filename(sigma, n)
        series.to_csv(path, index=False, float_format="%.17g")
        written.append(path)
    return written
