from __future__ import annotations

import itertools
import logging
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import svdvals
from scipy.special import gammaincc, xlogy
from sklearn.metrics import adjusted_rand_score

try:
    from .. import config, errors, models
except ImportError:  # pragma: no cover
    import config, errors, models  # type: ignore

try:
    from . import coupling_service, mixture_service
except ImportError:  # pragma: no cover
    import coupling_service, mixture_service  # type: ignore


logger = logging.getLogger(__name__)

LabelsLike = Union[models.HardLabels, np.ndarray, Sequence[int]]


def _as_labels(labels: LabelsLike, n_clusters: Optional[int] = None) -> models.HardLabels:
    if isinstance(labels, models.HardLabels):
        return labels
    arr = np.asarray(labels, dtype=int).ravel()
    return models.HardLabels(labels=arr, n_clusters=int(n_clusters or (arr.max() if arr.size else 1)))


# --- Permutation machinery ---


def permutation_rng(seed: int, replicate: int) -> np.random.Generator:
    """PCG64 stream for replicate b, independent of how replicates are scheduled."""
    return np.random.default_rng([int(seed), int(replicate)])


def _run_replicates(fn: Callable[[int], float], B: int, threads: int) -> np.ndarray:
    if threads <= 1 or B == 1:
        return np.array([fn(b) for b in range(B)], dtype=float)
    # joblib returns results in submission order.
    values = Parallel(n_jobs=threads, prefer="threads")(delayed(fn)(b) for b in range(B))
    return np.asarray(values, dtype=float)


def permutation_p_value(observed: float, null: np.ndarray, add_one: bool = False) -> float:
    """Share of null replicates at least as large as the observed statistic."""
    hits = int(np.sum(observed <= np.asarray(null)))
    B = int(np.asarray(null).size)
    if add_one:
        return (1.0 + hits) / (1.0 + B)
    return hits / B


# --- Coupling statistics ---


def effective_rank(Pi: np.ndarray) -> float:
    s = svdvals(np.asarray(Pi, dtype=float))
    if s.size == 0 or not s[0] > 0:
        raise errors.ZeroMatrix("Effective rank is undefined for the zero matrix")
    return float(np.sum(s) / s[0])


def soft_statistic(Pi: np.ndarray, resp1: np.ndarray, resp2: np.ndarray) -> float:
    """log of the pseudo likelihood ratio at a given joint matrix, in responsibility form."""
    Pi = np.asarray(Pi, dtype=float)
    pi1 = Pi.sum(axis=1)
    pi2 = Pi.sum(axis=0)
    C = Pi / np.outer(pi1, pi2)
    return coupling_service.responsibility_objective(np.asarray(resp1, float), np.asarray(resp2, float), C)


def plrt_statistic(
    fit1: models.MixtureFit,
    fit2: models.MixtureFit,
    opts: Optional[config.EgOptions] = None,
) -> Tuple[float, models.Coupling]:
    if fit1.n != fit2.n:
        raise errors.RowMismatch(fit1.n, fit2.n)
    coupling = coupling_service.estimate_c_from_responsibilities(
        fit1.responsibilities, fit2.responsibilities, fit1.pi, fit2.pi, opts
    )
    log_lambda = coupling_service.responsibility_objective(fit1.responsibilities, fit2.responsibilities, coupling.C)
    return log_lambda, coupling


def permutation_test_from_fits(
    fit1: models.MixtureFit,
    fit2: models.MixtureFit,
    B: int,
    seed: int,
    opts: Optional[config.EgOptions] = None,
    *,
    add_one: bool = False,
    threads: int = 1,
) -> models.TestResult:
    """
    Permutation p-value for the pseudo likelihood ratio statistic.

    Each replicate shuffles the rows of the view-2 responsibilities and re-estimates only C; the
    fitted marginal mixtures are reused unchanged.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    observed, coupling = plrt_statistic(fit1, fit2, opts)
    resp1, resp2 = fit1.responsibilities, fit2.responsibilities
    n = fit1.n

    def replicate(b: int) -> float:
        perm = permutation_rng(seed, b).permutation(n)
        shuffled = resp2[perm]
        null_coupling = coupling_service.estimate_c_from_responsibilities(resp1, shuffled, fit1.pi, fit2.pi, opts)
        return coupling_service.responsibility_objective(resp1, shuffled, null_coupling.C)

    null = _run_replicates(replicate, B, threads)
    p_value = permutation_p_value(observed, null, add_one)
    eff_rank = effective_rank(coupling.Pi)
    logger.info(f"PLRT: log_lambda={observed:.6g} p={p_value:.4g} B={B} effective_rank={eff_rank:.4g}")
    return models.TestResult(
        statistic=observed,
        p_value=p_value,
        p_value_kind=models.PValueKind.PERMUTATION,
        B=B,
        effective_rank=eff_rank,
        diagnostics={
            "eg_iterations": coupling.diagnostics.get("eg_iterations"),
            "eg_stopped": coupling.diagnostics.get("eg_stopped"),
            "sinkhorn_iterations": coupling.diagnostics.get("sinkhorn_iterations"),
            "step_size": coupling.diagnostics.get("step_size"),
            "halvings": coupling.diagnostics.get("halvings", 0),
            "excluded_observations": coupling.diagnostics.get("excluded_observations", 0),
            "add_one": add_one,
        },
        coupling=coupling,
        null_statistics=null,
    )


def permutation_test(
    view1: models.DataView,
    view2: models.DataView,
    K1: int,
    K2: int,
    B: int,
    seed: int,
    opts: Optional[config.EgOptions] = None,
    *,
    structure: Union[models.CovarianceStructure, str] = models.CovarianceStructure.SPHERICAL_SHARED,
    em_opts: Optional[config.EmOptions] = None,
    add_one: bool = False,
    threads: int = 1,
) -> models.TestResult:
    if view1.n != view2.n:
        raise errors.RowMismatch(view1.n, view2.n)
    fit1 = mixture_service.fit_mixture(view1, K1, structure, em_opts)
    fit2 = mixture_service.fit_mixture(view2, K2, structure, em_opts)
    return permutation_test_from_fits(fit1, fit2, B, seed, opts, add_one=add_one, threads=threads)


# --- Contingency-table baselines ---


def contingency_table(
    labels1: LabelsLike,
    labels2: LabelsLike,
    K1: Optional[int] = None,
    K2: Optional[int] = None,
) -> models.ContingencyTable:
    l1 = _as_labels(labels1, K1)
    l2 = _as_labels(labels2, K2)
    if l1.n != l2.n:
        raise errors.RowMismatch(l1.n, l2.n)
    k1, k2 = l1.n_clusters, l2.n_clusters
    cells = l1.zero_based * k2 + l2.zero_based
    N = np.bincount(cells, minlength=k1 * k2).reshape(k1, k2)
    return models.ContingencyTable(N=N)


def _g_statistic(N: np.ndarray) -> float:
    N = np.asarray(N, dtype=float)
    n = N.sum()
    if not n > 0:
        return 0.0
    expected = np.outer(N.sum(axis=1), N.sum(axis=0))
    mask = N > 0
    return float(2.0 * np.sum(xlogy(N[mask], n * N[mask] / expected[mask])))


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution via the regularised incomplete gamma function."""
    if df <= 0 or x <= 0:
        return 1.0
    return float(gammaincc(0.5 * df, 0.5 * x))


def g_test(table: models.ContingencyTable) -> Tuple[float, int, float]:
    N = table.N
    if table.n < 1:
        raise errors.EmptyMarginal("Contingency table is empty")
    empty_rows = np.flatnonzero(table.row_sums == 0)
    empty_cols = np.flatnonzero(table.col_sums == 0)
    if empty_rows.size or empty_cols.size:
        raise errors.EmptyMarginal(
            f"Contingency table has empty rows {(empty_rows + 1).tolist()} / columns {(empty_cols + 1).tolist()}"
        )
    g2 = _g_statistic(N)
    df = (N.shape[0] - 1) * (N.shape[1] - 1)
    return g2, df, chi2_sf(g2, df)


def mutual_information(table: models.ContingencyTable) -> float:
    if table.n < 1:
        return 0.0
    return _g_statistic(table.N) / (2.0 * table.n)


def g_test_result(table: models.ContingencyTable) -> models.TestResult:
    g2, df, p = g_test(table)
    return models.TestResult(statistic=g2, p_value=p, p_value_kind=models.PValueKind.CHI_SQUARE, df=df)


def _label_permutation_test(
    statistic: Callable[[np.ndarray, np.ndarray], float],
    labels1: models.HardLabels,
    labels2: models.HardLabels,
    B: int,
    seed: int,
    add_one: bool,
    threads: int,
) -> models.TestResult:
    if labels1.n != labels2.n:
        raise errors.RowMismatch(labels1.n, labels2.n)
    if B < 1:
        raise ValueError("B must be >= 1")
    z1, z2 = labels1.labels, labels2.labels
    observed = statistic(z1, z2)

    def replicate(b: int) -> float:
        return statistic(z1, z2[permutation_rng(seed, b).permutation(labels2.n)])

    null = _run_replicates(replicate, B, threads)
    return models.TestResult(
        statistic=observed,
        p_value=permutation_p_value(observed, null, add_one),
        p_value_kind=models.PValueKind.PERMUTATION,
        B=B,
        diagnostics={"add_one": add_one},
        null_statistics=null,
    )


def g_test_permutation(
    labels1: LabelsLike,
    labels2: LabelsLike,
    B: int,
    seed: int,
    *,
    add_one: bool = False,
    threads: int = 1,
) -> models.TestResult:
    l1, l2 = _as_labels(labels1), _as_labels(labels2)

    def g2(z1: np.ndarray, z2: np.ndarray) -> float:
        return _g_statistic(contingency_table(
            models.HardLabels(z1, l1.n_clusters), models.HardLabels(z2, l2.n_clusters)
        ).N)

    return _label_permutation_test(g2, l1, l2, B, seed, add_one, threads)


def adjusted_rand(labels1: LabelsLike, labels2: LabelsLike) -> float:
    """Hubert-Arabie adjusted Rand index; two single-cluster labelings score 1, one alone scores 0."""
    l1, l2 = _as_labels(labels1), _as_labels(labels2)
    if l1.n != l2.n:
        raise errors.RowMismatch(l1.n, l2.n)
    return float(adjusted_rand_score(l1.labels, l2.labels))


def ari_permutation(
    labels1: LabelsLike,
    labels2: LabelsLike,
    B: int,
    seed: int,
    *,
    add_one: bool = False,
    threads: int = 1,
) -> models.TestResult:
    l1, l2 = _as_labels(labels1), _as_labels(labels2)
    return _label_permutation_test(
        lambda z1, z2: float(adjusted_rand_score(z1, z2)), l1, l2, B, seed, add_one, threads
    )


def check_hard_assignment_identity(resp1: np.ndarray, resp2: np.ndarray, tol: float = 1e-10) -> models.HardAssignmentReport:
    """
    Harden both responsibility matrices and compare the hard-assignment statistic with G^2/2 and n*MI.

    Clusters that receive no observation are dropped before the joint matrix N/n is formed.
    """
    l1 = mixture_service.hard_labels(np.asarray(resp1, dtype=float))
    l2 = mixture_service.hard_labels(np.asarray(resp2, dtype=float))
    table = contingency_table(l1, l2)
    used1 = np.flatnonzero(table.row_sums > 0)
    used2 = np.flatnonzero(table.col_sums > 0)
    N = table.N[np.ix_(used1, used2)]
    n = int(N.sum())

    relabel1 = np.full(l1.n_clusters, -1)
    relabel1[used1] = np.arange(used1.size)
    relabel2 = np.full(l2.n_clusters, -1)
    relabel2[used2] = np.arange(used2.size)
    onehot1 = np.eye(used1.size)[relabel1[l1.zero_based]]
    onehot2 = np.eye(used2.size)[relabel2[l2.zero_based]]

    hard = soft_statistic(N / n, onehot1, onehot2)
    g2 = _g_statistic(N)
    n_mi = n * mutual_information(models.ContingencyTable(N=N))
    gap = max(abs(hard - g2 / 2.0), abs(n_mi - g2 / 2.0))
    return models.HardAssignmentReport(
        hard_statistic=hard,
        g2_half=g2 / 2.0,
        n_mutual_information=n_mi,
        gap=gap,
        holds=bool(gap < tol),
    )


# --- End-to-end workflow ---


def _fit_view(
    view: models.DataView,
    K: Optional[int],
    options: config.IndependenceOptions,
) -> Tuple[models.MixtureFit, Optional[Dict[int, Optional[float]]]]:
    if options.k_policy == "fixed":
        return mixture_service.fit_mixture(view, int(K), options.structure, options.em), None
    sel = mixture_service.select_k_with_trace(
        view,
        (options.k_min, options.k_max),
        options.structure,
        options.k_policy,
        options.em,
        min_k_two=options.min_k_two,
    )
    return sel.fit, sel.trace


def _report_from_fits(
    view1_id: str,
    view2_id: str,
    fit1: models.MixtureFit,
    fit2: models.MixtureFit,
    options: config.IndependenceOptions,
    selection1: Optional[Dict[int, Optional[float]]] = None,
    selection2: Optional[Dict[int, Optional[float]]] = None,
) -> models.IndependenceReport:
    plrt = permutation_test_from_fits(
        fit1, fit2, options.B, options.seed, options.eg, add_one=options.add_one, threads=options.threads
    )
    labels1 = mixture_service.hard_labels(fit1)
    labels2 = mixture_service.hard_labels(fit2)
    table = contingency_table(labels1, labels2)

    baseline_errors: Dict[str, str] = {}
    g_chisq: Optional[models.TestResult] = None
    try:
        g_chisq = g_test_result(table)
    except errors.EmptyMarginal as exc:
        logger.warning(f"{view1_id} x {view2_id}: chi-square G-test skipped ({exc})")
        baseline_errors["g_test_chisq"] = str(exc)

    g_perm = g_test_permutation(
        labels1, labels2, options.B, options.seed, add_one=options.add_one, threads=options.threads
    )
    ari = ari_permutation(labels1, labels2, options.B, options.seed, add_one=options.add_one, threads=options.threads)
    return models.IndependenceReport(
        view1_id=view1_id,
        view2_id=view2_id,
        n=fit1.n,
        fit1=fit1,
        fit2=fit2,
        plrt=plrt,
        table=table,
        g_test_chisq=g_chisq,
        g_test_perm=g_perm,
        mutual_information=mutual_information(table),
        ari=ari,
        k_policy=options.k_policy,
        selection1=selection1,
        selection2=selection2,
        baseline_errors=baseline_errors,
    )


def test_independence(
    view1: models.DataView,
    view2: models.DataView,
    options: config.IndependenceOptions,
) -> models.IndependenceReport:
    """Fit each view once, then run the PLRT permutation test and the hard-label baselines."""
    if view1.n != view2.n:
        raise errors.RowMismatch(view1.n, view2.n)
    fit1, sel1 = _fit_view(view1, options.k1, options)
    fit2, sel2 = _fit_view(view2, options.k2, options)
    logger.info(f"Testing {view1.view_id} (K={fit1.K}) against {view2.view_id} (K={fit2.K}), n={view1.n}")
    return _report_from_fits(view1.view_id, view2.view_id, fit1, fit2, options, sel1, sel2)


test_independence.__test__ = False  # type: ignore[attr-defined]


def test_all_pairs(
    views: Sequence[models.DataView],
    options: config.IndependenceOptions,
) -> List[models.IndependenceReport]:
    """
    One independence test per unordered pair of views.

    Each view is fitted once; with k_policy=fixed the same k1 is used for every view.
    """
    if len(views) < 2:
        raise errors.InputError("Pairwise testing needs at least two views")
    n = views[0].n
    for v in views[1:]:
        if v.n != n:
            raise errors.RowMismatch(n, v.n)
    fitted = [_fit_view(v, options.k1, options) for v in views]
    reports: List[models.IndependenceReport] = []
    for i, j in itertools.combinations(range(len(views)), 2):
        (fit_i, sel_i), (fit_j, sel_j) = fitted[i], fitted[j]
        reports.append(_report_from_fits(views[i].view_id, views[j].view_id, fit_i, fit_j, options, sel_i, sel_j))
    return reports


test_all_pairs.__test__ = False  # type: ignore[attr-defined]
