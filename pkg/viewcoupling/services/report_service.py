from __future__ import annotations

import enum
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

try:
    from .. import models, schemas
except ImportError:  # pragma: no cover
    import models, schemas  # type: ignore

try:
    from . import coupling_service, mixture_service
except ImportError:  # pragma: no cover
    import coupling_service, mixture_service  # type: ignore


logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """numpy/enum values to plain Python; non-finite floats become None; dict keys become strings."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return f if math.isfinite(f) else None
    return value


def _statistic_doc(result: models.TestResult) -> Dict[str, Any]:
    return {
        "statistic": result.statistic,
        "p_value": result.p_value,
        "p_value_kind": result.p_value_kind.value,
        "B": result.B,
        "df": result.df,
    }


def fit_summary(
    fit: models.MixtureFit,
    view_id: str,
    selection: Optional[Dict[int, Optional[float]]] = None,
) -> Dict[str, Any]:
    return {
        "view_id": view_id,
        "K": fit.K,
        "structure": fit.structure.value,
        "loglik": fit.loglik,
        "bic": fit.bic,
        "aic": fit.aic,
        "n_params": fit.n_params,
        "n_iter": fit.n_iter,
        "converged": fit.converged,
        "selection": selection,
    }


def result_document(
    report: models.IndependenceReport,
    alpha: float,
    *,
    command: str = "test",
    provenance: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Result document for one pair of views.

    Holds nothing that depends on wall-clock time or worker count, so equal seeds give equal bytes.
    """
    plrt = report.plrt
    coupling = plrt.coupling or coupling_service.independence_coupling(report.fit1.pi, report.fit2.pi)
    doc = {
        "schema_version": 1,
        "command": command,
        "view1": report.view1_id,
        "view2": report.view2_id,
        "n": report.n,
        "K1": report.K1,
        "K2": report.K2,
        "k_policy": report.k_policy,
        "alpha": alpha,
        "rejected": bool(plrt.p_value <= alpha),
        "plrt": {
            **_statistic_doc(plrt),
            "effective_rank": plrt.effective_rank,
            "Pi": coupling.Pi,
            "C": coupling.C,
            "pi1": coupling.pi1,
            "pi2": coupling.pi2,
            "diagnostics": plrt.diagnostics,
        },
        "contingency_table": report.table.N,
        "baselines": {
            "g_test_chisq": _statistic_doc(report.g_test_chisq) if report.g_test_chisq else None,
            "g_test_perm": _statistic_doc(report.g_test_perm),
            "mutual_information": report.mutual_information,
            "ari": _statistic_doc(report.ari),
            "errors": report.baseline_errors,
        },
        "fits": [
            fit_summary(report.fit1, report.view1_id, report.selection1),
            fit_summary(report.fit2, report.view2_id, report.selection2),
        ],
        "provenance": provenance or {},
    }
    doc = to_jsonable(doc)
    schemas.TestResultDoc.model_validate(doc)
    return doc


def fit_document(
    fit: models.MixtureFit,
    view_id: str,
    selection: Optional[Dict[int, Optional[float]]] = None,
    provenance: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    doc = to_jsonable(
        {
            "schema_version": 1,
            "command": "fit",
            "fit": fit_summary(fit, view_id, selection),
            "pi": fit.pi,
            "means": fit.means,
            "covariance": fit.covariance,
            "labels": mixture_service.hard_labels(fit).labels,
            "provenance": provenance or {},
        }
    )
    schemas.FitResultDoc.model_validate(doc)
    return doc


def _fmt(value: Optional[float], digits: int = 6) -> str:
    if value is None or (isinstance(value, float) and not math.isfinite(value)):
        return "NA"
    return f"{value:.{digits}g}"


def _matrix_lines(mat: np.ndarray, digits: int = 4) -> List[str]:
    arr = np.asarray(mat)
    if np.issubdtype(arr.dtype, np.integer):
        cells = [[str(int(x)) for x in row] for row in arr]
    else:
        cells = [[_fmt(float(x), digits) for x in row] for row in arr]
    width = max((len(c) for row in cells for c in row), default=1)
    return ["    " + "  ".join(c.rjust(width) for c in row) for row in cells]


def summary_text(report: models.IndependenceReport, alpha: float) -> str:
    plrt = report.plrt
    lines = [
        f"Views            : {report.view1_id} x {report.view2_id}",
        f"Observations     : {report.n}",
        f"Clusters         : K1={report.K1}  K2={report.K2}  ({report.k_policy})",
        "",
        f"PLRT log-ratio   : {_fmt(plrt.statistic)}",
        f"PLRT p-value     : {_fmt(plrt.p_value)}  (B={plrt.B}, permutation)",
        f"Effective rank   : {_fmt(plrt.effective_rank)}",
        f"Decision         : {'reject' if plrt.p_value <= alpha else 'do not reject'} independence at alpha={alpha:g}",
    ]
    if plrt.coupling is not None:
        lines += ["", "Estimated Pi:"] + _matrix_lines(plrt.coupling.Pi)
    lines += ["", "Hard-label contingency table:"] + _matrix_lines(report.table.N.astype(int))
    g = report.g_test_chisq
    lines += [
        "",
        "Baselines:",
        f"  G-test (chi^2)   : "
        + (f"G2={_fmt(g.statistic)}  df={g.df}  p={_fmt(g.p_value)}" if g else f"skipped ({report.baseline_errors.get('g_test_chisq', '')})"),
        f"  G-test (perm)    : G2={_fmt(report.g_test_perm.statistic)}  p={_fmt(report.g_test_perm.p_value)}",
        f"  Mutual info      : {_fmt(report.mutual_information)}",
        f"  ARI (perm)       : ARI={_fmt(report.ari.statistic)}  p={_fmt(report.ari.p_value)}",
    ]
    return "\n".join(lines) + "\n"


def pairs_frame(reports: Sequence[models.IndependenceReport], alpha: float) -> pd.DataFrame:
    rows = []
    for r in reports:
        rows.append(
            {
                "view1": r.view1_id,
                "view2": r.view2_id,
                "n": r.n,
                "K1": r.K1,
                "K2": r.K2,
                "statistic": r.plrt.statistic,
                "p_value": r.plrt.p_value,
                "effective_rank": r.plrt.effective_rank,
                "rejected": bool(r.plrt.p_value <= alpha),
                "g_test_perm_p": r.g_test_perm.p_value,
                "ari": r.ari.statistic,
                "ari_p": r.ari.p_value,
                "mutual_information": r.mutual_information,
            }
        )
    return pd.DataFrame(rows)


def write_json(doc: Any, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    # float repr round-trips exactly with at most 17 significant digits.
    out.write_text(json.dumps(to_jsonable(doc), indent=2, allow_nan=False) + "\n", encoding="utf-8")
    logger.info(f"Wrote {out}")
    return out


def write_text(text: str, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    return out


def write_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False, float_format="%.17g")
    logger.info(f"Wrote {out}")
    return out
