from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

try:
    from .. import errors, models
except ImportError:  # pragma: no cover
    import errors, models  # type: ignore


logger = logging.getLogger(__name__)


@dataclass
class LoadedView:
    path: str
    view_id: str
    frame: pd.DataFrame
    ids: Optional[pd.Index] = None


@dataclass
class PreparedViews:
    views: List[models.DataView]
    provenance: Dict[str, Any] = field(default_factory=dict)


def read_view_csv(path: Union[str, Path], id_col: Optional[str] = None) -> LoadedView:
    """
    Read one view: header row, UTF-8, '.' decimals, optional ID column.

    Empty cells become missing values; any other non-numeric cell is an error that names its
    1-based data row and column.
    """
    p = Path(path)
    try:
        raw = pd.read_csv(p, dtype=str, keep_default_na=False, encoding="utf-8")
    except FileNotFoundError:
        raise errors.InputError(f"{p}: file not found")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise errors.InputError(f"{p}: cannot parse CSV ({exc})")

    ids: Optional[pd.Index] = None
    if id_col:
        if id_col not in raw.columns:
            logger.info(f"{p}: no ID column '{id_col}', rows will be aligned by position")
        else:
            ids = pd.Index(raw[id_col].astype(str).str.strip(), name=id_col)
            if ids.has_duplicates:
                dup = ids[ids.duplicated()][0]
                raise errors.InputError(f"{p}: duplicate ID {dup!r} in column '{id_col}'")
            raw = raw.drop(columns=[id_col])

    if raw.shape[1] == 0:
        raise errors.InputError(f"{p}: no feature columns")

    text = raw.apply(lambda col: col.str.strip())
    missing = text.eq("") | text.isin(["NA", "NaN", "nan"])
    numeric = text.mask(missing).apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna() & ~missing
    if bad.to_numpy().any():
        r, c = np.argwhere(bad.to_numpy())[0]
        raise errors.NonNumericCell(str(p), int(r) + 1, str(raw.columns[c]), raw.iat[r, c])

    numeric = numeric.astype(float)
    if not np.all(np.isfinite(numeric.to_numpy()[~missing.to_numpy()])):
        raise errors.NonFiniteInput(f"{p}: contains infinite values")
    numeric.index = ids if ids is not None else pd.RangeIndex(len(numeric))
    return LoadedView(path=str(p), view_id=p.stem, frame=numeric, ids=ids)


def align_views(views: Sequence[LoadedView]) -> Tuple[List[pd.DataFrame], Dict[str, Any]]:
    """Inner-join on IDs when every view has them (first view's order), otherwise align by position."""
    if all(v.ids is not None for v in views):
        common = views[0].ids
        for v in views[1:]:
            common = common[common.isin(v.ids)]
        if len(common) == 0:
            raise errors.EmptyAfterJoin("No IDs are shared by all views")
        frames = [v.frame.loc[common] for v in views]
        info = {
            "alignment": "id_join",
            "rows_before": [int(len(v.frame)) for v in views],
            "rows_joined": int(len(common)),
        }
        logger.info(f"ID join kept {len(common)} row(s) of {info['rows_before']}")
        return frames, info

    n0 = len(views[0].frame)
    for v in views[1:]:
        if len(v.frame) != n0:
            raise errors.RowMismatch(n0, len(v.frame))
    return [v.frame.reset_index(drop=True) for v in views], {"alignment": "position", "rows": n0}


def _drop_sparse_features(frame: pd.DataFrame, max_missing: float, view_id: str) -> pd.DataFrame:
    share = frame.isna().mean(axis=0)
    dropped = list(share.index[share > max_missing])
    if dropped:
        logger.warning(f"{view_id}: dropping {len(dropped)} feature(s) with more than {max_missing:.0%} missing")
    return frame.drop(columns=dropped)


def standardize(frame: pd.DataFrame, view_id: str = "view") -> Tuple[pd.DataFrame, List[str]]:
    """Centre each column and scale it to unit standard deviation; zero-SD columns are dropped."""
    sd = frame.std(axis=0, ddof=1)
    constant = list(sd.index[~(sd > 0)])
    if constant:
        logger.warning(f"{view_id}: dropping {len(constant)} zero-variance column(s): {constant}")
    kept = frame.drop(columns=constant)
    return (kept - kept.mean(axis=0)) / sd[kept.columns], constant


def prepare_views(
    paths: Sequence[Union[str, Path]],
    *,
    id_col: Optional[str] = None,
    standardize_columns: bool = False,
    impute_mean: bool = False,
    max_missing: Optional[float] = None,
) -> PreparedViews:
    if len(paths) < 1:
        raise errors.InputError("No input views given")
    loaded = [read_view_csv(p, id_col) for p in paths]
    frames, info = align_views(loaded) if len(loaded) > 1 else ([loaded[0].frame], {"alignment": "single"})
    provenance: Dict[str, Any] = {
        "inputs": [Path(v.path).name for v in loaded],
        "id_col": id_col,
        "standardize": bool(standardize_columns),
        "impute_mean": bool(impute_mean),
        "max_missing": max_missing,
        **info,
    }

    if max_missing is not None:
        if not 0.0 <= max_missing <= 1.0:
            raise errors.ConfigError("max_missing must lie in [0, 1]")
        frames = [_drop_sparse_features(f, max_missing, v.view_id) for f, v in zip(frames, loaded)]
        sparse_rows = np.zeros(len(frames[0]), dtype=bool)
        for f in frames:
            sparse_rows |= (f.isna().mean(axis=1) > max_missing).to_numpy()
        if sparse_rows.any():
            logger.warning(f"Dropping {int(sparse_rows.sum())} observation(s) with more than {max_missing:.0%} missing")
        frames = [f.loc[~sparse_rows] for f in frames]
        provenance["rows_dropped_missing"] = int(sparse_rows.sum())

    if impute_mean:
        frames = [f.fillna(f.mean(axis=0)) for f in frames]

    views: List[models.DataView] = []
    dropped_constant: Dict[str, List[str]] = {}
    for f, v in zip(frames, loaded):
        if f.shape[1] == 0:
            raise errors.InputError(f"{v.path}: no features left after filtering")
        if f.isna().to_numpy().any():
            r, c = np.argwhere(f.isna().to_numpy())[0]
            raise errors.MissingValues(
                f"{v.path}: missing value at row {int(r) + 1}, column '{f.columns[c]}' "
                f"({int(f.isna().to_numpy().sum())} in total); use --impute-mean or --max-missing"
            )
        if standardize_columns:
            f, constant = standardize(f, v.view_id)
            dropped_constant[v.view_id] = constant
            if f.shape[1] == 0:
                raise errors.InputError(f"{v.path}: every column is constant")
        if len(f) < 2:
            raise errors.EmptyAfterJoin(f"{v.path}: fewer than two observations remain")
        views.append(models.DataView(f.to_numpy(dtype=float), view_id=v.view_id, feature_names=[str(c) for c in f.columns]))

    if standardize_columns:
        provenance["dropped_constant_columns"] = dropped_constant
    provenance["n"] = views[0].n
    return PreparedViews(views=views, provenance=provenance)


def write_view_csv(view: models.DataView, path: Union[str, Path]) -> Path:
    names = view.feature_names or [f"x{j + 1}" for j in range(view.p)]
    frame = pd.DataFrame(view.data, columns=names)
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    return out
