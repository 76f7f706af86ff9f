"""
Named simulation inputs: mean matrices for the two views and shared covariance choices.

Means are stored K x p (one row per component). Columns below are written as blocks of
(value, length), top to bottom.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

try:
    from . import errors
    from .models import ComponentFamily, FamilyKind, MeanCatalogEntry
except ImportError:  # pragma: no cover
    import errors  # type: ignore
    from models import ComponentFamily, FamilyKind, MeanCatalogEntry  # type: ignore


Block = Tuple[float, int]

SQRT12 = float(np.sqrt(12.0))

DENSE_SIGMA = np.array([[2.25, 0.5], [0.5, 2.25]])
DIAG_SIGMA = np.diag([2.25, 4.0])

# Power-study grids used when a config does not supply its own.
DEFAULT_DELTAS: Tuple[float, ...] = (0.0, 0.3, 0.6, 0.9, 1.0)
DEFAULT_SIGMAS: Dict[str, Tuple[float, ...]] = {
    "K6_P10": (2.4, 4.8, 9.6),
    "K3_P10": (2.4, 4.8, 9.6),
    "K3_P100": (4.8, 9.6, 19.2),
    "K6_P100": (4.8, 9.6, 19.2),
    "META_CHOICE1": (0.4,),
    "META_CHOICE2": (0.4,),
    "EQUIDISTANT_K3_P2": (1.0,),
}
DEFAULT_NS: Tuple[int, ...] = (50, 100, 200)


def _column(blocks: Sequence[Block]) -> np.ndarray:
    return np.concatenate([np.full(length, float(value)) for value, length in blocks])


def _stack(columns: Sequence[Sequence[Block]]) -> np.ndarray:
    return np.vstack([_column(c) for c in columns])


def _k6_columns(a: int, b: int, c: int) -> Tuple[List[List[Block]], List[List[Block]]]:
    """Six-component blocks; view 1 splits features a|a, view 2 splits b|c and c|b."""
    view1 = [
        [(2, a), (0, a)],
        [(0, a), (2, a)],
        [(2, a), (-2, a)],
        [(-2, a), (0, a)],
        [(0, a), (-2, a)],
        [(-2, a), (2, a)],
    ]
    view2 = [
        [(-2, b), (0, c)],
        [(0, b), (-2, c)],
        [(-2, b), (2, c)],
        [(2, b), (0, c)],
        [(0, c), (2, b)],
        [(2, c), (-2, b)],
    ]
    return view1, view2


def _build() -> Dict[str, MeanCatalogEntry]:
    entries: Dict[str, MeanCatalogEntry] = {}

    v1, v2 = _k6_columns(5, 6, 4)
    entries["K6_P10"] = MeanCatalogEntry("K6_P10", _stack(v1), _stack(v2), "K=6, p=10 main power study")
    entries["K3_P10"] = MeanCatalogEntry("K3_P10", _stack(v1[:3]), _stack(v2[:3]), "K=3, p=10")

    v1, v2 = _k6_columns(50, 60, 40)
    entries["K3_P100"] = MeanCatalogEntry("K3_P100", _stack(v1[:3]), _stack(v2[:3]), "K=3, p=100")
    entries["K6_P100"] = MeanCatalogEntry("K6_P100", _stack(v1), _stack(v2), "K=6, p=100")

    meta1 = np.array([[2.0, -2.0], [2.0, -1.0], [-2.0, 1.0], [-2.0, 2.0]])
    entries["META_CHOICE1"] = MeanCatalogEntry(
        "META_CHOICE1",
        meta1,
        np.array([[-2.0, -2.0], [-2.0, -1.0], [2.0, 1.0], [2.0, 2.0]]),
        "K=4, p=2; meta-clusters agree when the clusters agree",
    )
    entries["META_CHOICE2"] = MeanCatalogEntry(
        "META_CHOICE2",
        meta1.copy(),
        np.array([[2.0, 2.0], [-2.0, -2.0], [-2.0, -1.0], [2.0, 1.0]]),
        "K=4, p=2; meta-clusters stay unrelated when the clusters agree",
    )
    entries["EQUIDISTANT_K3_P2"] = MeanCatalogEntry(
        "EQUIDISTANT_K3_P2",
        np.array([[0.0, 2.0], [0.0, -2.0], [SQRT12, 0.0]]),
        np.array([[-2.0, 0.0], [0.0, SQRT12], [2.0, 0.0]]),
        "K=3, p=2 equidistant means; dense/diagonal covariance and Student-t studies",
    )
    return entries


MEAN_CATALOG: Dict[str, MeanCatalogEntry] = _build()


def get_entry(entry_id: str) -> MeanCatalogEntry:
    key = str(entry_id or "").strip().upper()
    if key not in MEAN_CATALOG:
        raise KeyError(f"Unknown mean catalog entry {entry_id!r}; known: {sorted(MEAN_CATALOG)}")
    return MEAN_CATALOG[key]


def load_means_csv(path: Union[str, Path]) -> MeanCatalogEntry:
    """
    Mean matrices from a CSV with a `view` column (1 or 2) and one row per component, in order.

    The other columns are coordinates. A view with fewer features than the widest one leaves its
    trailing cells empty.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise errors.InputError(f"Means file not found: {path}") from exc
    except pd.errors.EmptyDataError as exc:
        raise errors.InputError(f"Means file is empty: {path}") from exc
    if "view" not in frame.columns:
        raise errors.InputError(f"Means file {path.name} needs a 'view' column")

    views = pd.to_numeric(frame["view"], errors="coerce")
    raw = frame.drop(columns="view")
    coords = raw.apply(pd.to_numeric, errors="coerce")
    bad = coords.isna() & raw.notna()
    if bad.to_numpy().any():
        row, col = next(zip(*np.nonzero(bad.to_numpy())))
        raise errors.NonNumericCell(str(path), int(row) + 1, str(raw.columns[col]), raw.iat[row, col])
    if not views.isin([1, 2]).all():
        raise errors.InputError(f"Means file {path.name}: 'view' must be 1 or 2 on every row")

    matrices: List[np.ndarray] = []
    for v in (1, 2):
        rows = coords[views == v].to_numpy(dtype=float)
        if rows.shape[0] == 0:
            raise errors.InputError(f"Means file {path.name} has no rows for view {v}")
        filled = ~np.isnan(rows)
        p = int(filled.sum(axis=1).max())
        if p == 0 or not filled[:, :p].all() or filled[:, p:].any():
            raise errors.InputError(f"Means file {path.name}: view {v} rows must fill the same leading columns")
        matrices.append(rows[:, :p])
    if matrices[0].shape[0] != matrices[1].shape[0]:
        raise errors.InputError(
            f"Means file {path.name}: view 1 has {matrices[0].shape[0]} components, view 2 has {matrices[1].shape[0]}"
        )
    return MeanCatalogEntry(path.stem.upper(), matrices[0], matrices[1], f"loaded from {path.name}")


def family_for(name: str, sigma: float = 1.0, df: float = 3.0) -> ComponentFamily:
    """
    Component family by name: SPHERICAL (sigma^2 I), DENSE_SHARED, DENSE_DIAG or STUDENT_T.

    DENSE_DIAG uses the dense matrix in view 1 and diag(2.25, 4) in view 2.
    """
    key = str(name or "").strip().upper()
    if key == "SPHERICAL":
        return ComponentFamily(FamilyKind.GAUSSIAN_SPHERICAL, sigma=float(sigma), label="SPHERICAL")
    if key == "DENSE_SHARED":
        return ComponentFamily(FamilyKind.GAUSSIAN_SHARED, cov1=DENSE_SIGMA, cov2=DENSE_SIGMA, label=key)
    if key == "DENSE_DIAG":
        return ComponentFamily(FamilyKind.GAUSSIAN_SHARED, cov1=DENSE_SIGMA, cov2=DIAG_SIGMA, label=key)
    if key == "STUDENT_T":
        return ComponentFamily(FamilyKind.STUDENT_T, cov1=DENSE_SIGMA, cov2=DENSE_SIGMA, df=float(df), label=key)
    raise KeyError(f"Unknown component family {name!r}")


def catalog_document() -> Dict[str, Dict[str, object]]:
    return {
        entry_id: {
            "K": entry.K,
            "p1": entry.p1,
            "p2": entry.p2,
            "description": entry.description,
            "mu1": entry.mu1.tolist(),
            "mu2": entry.mu2.tolist(),
        }
        for entry_id, entry in MEAN_CATALOG.items()
    }
