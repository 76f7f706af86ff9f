from __future__ import annotations

from dataclasses import dataclass
import logging
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import logsumexp
from sklearn.cluster import kmeans_plusplus

try:
    from .. import config, errors, models
except ImportError:  # pragma: no cover
    import config, errors, models  # type: ignore


logger = logging.getLogger(__name__)

_LOG_2PI = float(np.log(2.0 * np.pi))

ViewLike = Union[models.DataView, np.ndarray]


def _as_view(view: ViewLike) -> models.DataView:
    if isinstance(view, models.DataView):
        return view
    return models.DataView(np.asarray(view, dtype=float))


def _restart_seeds(seed: int, count: int) -> List[int]:
    """One independent 32-bit seed per restart, derived by restart index."""
    children = np.random.SeedSequence(int(seed)).spawn(int(count))
    return [int(child.generate_state(1)[0]) for child in children]


def _variance_floor(X: np.ndarray, relative: float) -> float:
    scale = float(np.mean(np.var(X, axis=0)))
    if not scale > 0:
        scale = 1.0
    return relative * scale


def log_component_densities(
    X: np.ndarray,
    means: np.ndarray,
    structure: models.CovarianceStructure,
    covariance: np.ndarray,
) -> np.ndarray:
    """
    n x K matrix of log N(x_i; mean_k, Sigma) for a covariance shared by every component.

    EII expects `covariance` = [sigma^2], EEI the diagonal, EEE the full p x p matrix.
    """
    X = np.asarray(X, dtype=float)
    means = np.atleast_2d(np.asarray(means, dtype=float))
    p = X.shape[1]

    if structure is models.CovarianceStructure.SPHERICAL_SHARED:
        var = float(np.asarray(covariance).ravel()[0])
        sq = cdist(X, means, "sqeuclidean")
        return -0.5 * (p * (_LOG_2PI + np.log(var)) + sq / var)

    if structure is models.CovarianceStructure.DIAGONAL_SHARED:
        var = np.asarray(covariance, dtype=float).ravel()
        scale = np.sqrt(var)
        sq = cdist(X / scale, means / scale, "sqeuclidean")
        return -0.5 * (p * _LOG_2PI + float(np.sum(np.log(var))) + sq)

    cov = np.asarray(covariance, dtype=float)
    chol = linalg.cholesky(cov, lower=True)
    Xw = linalg.solve_triangular(chol, X.T, lower=True).T
    Mw = linalg.solve_triangular(chol, means.T, lower=True).T
    sq = cdist(Xw, Mw, "sqeuclidean")
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (p * _LOG_2PI + logdet + sq)


def _e_step(log_phi: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    weighted = log_phi + np.log(pi)[None, :]
    row_ll = logsumexp(weighted, axis=1)
    resp = np.exp(weighted - row_ll[:, None])
    return resp, row_ll


def _m_step(
    X: np.ndarray,
    resp: np.ndarray,
    structure: models.CovarianceStructure,
    floor: float,
    fixed_variance: Optional[float],
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    n, p = X.shape
    Nk = resp.sum(axis=0)
    pi = Nk / n
    means = (resp.T @ X) / Nk[:, None]

    if structure is models.CovarianceStructure.SPHERICAL_SHARED:
        if fixed_variance is not None:
            return means, np.array([float(fixed_variance)]), pi
        sq = cdist(X, means, "sqeuclidean")
        var = float(np.sum(resp * sq)) / (n * p)
        return means, np.array([max(var, floor)]), pi

    if structure is models.CovarianceStructure.DIAGONAL_SHARED:
        diag = np.zeros(p)
        for k in range(means.shape[0]):
            diff = X - means[k]
            diag += resp[:, k] @ (diff * diff)
        return means, np.maximum(diag / n, floor), pi

    W = np.zeros((p, p))
    for k in range(means.shape[0]):
        diff = X - means[k]
        W += (diff * resp[:, k][:, None]).T @ diff
    W = 0.5 * (W + W.T) / n
    # The eigenvalue-clipped scatter is the constrained maximiser, so EM stays monotone.
    w, V = linalg.eigh(W)
    W = (V * np.maximum(w, floor)) @ V.T
    return means, 0.5 * (W + W.T), pi


@dataclass
class _RunState:
    means: np.ndarray
    covariance: np.ndarray
    pi: np.ndarray
    log_phi: np.ndarray
    resp: np.ndarray
    row_ll: np.ndarray
    trace: List[float]
    n_iter: int
    converged: bool
    n_reseeds: int


def _reseed_low_mass(
    resp: np.ndarray,
    scores: np.ndarray,
    pi_floor: float,
    reseeds: int,
    max_reseeds: int,
) -> Tuple[np.ndarray, int, bool]:
    """Hand the worst-fitting observations to components whose mass fell below the floor."""
    n = resp.shape[0]
    mass = resp.sum(axis=0) / n
    low = np.flatnonzero(mass < pi_floor)
    if low.size == 0:
        return resp, reseeds, False
    if reseeds >= max_reseeds:
        k = int(low[0])
        raise errors.DegenerateCluster(
            f"Component {k + 1} has mixing proportion {mass[k]:.3g} below 1/(10n) after {reseeds} reseed(s)",
            component=k + 1,
        )
    order = np.argsort(scores, kind="stable")
    resp = resp.copy()
    for j, k in enumerate(low):
        i = int(order[j])
        resp[i] = 0.0
        resp[i, k] = 1.0
    logger.warning(f"Reseeding {low.size} low-mass component(s) at the worst-fitting observation(s)")
    return resp, reseeds + 1, True


def _run_em(
    X: np.ndarray,
    K: int,
    structure: models.CovarianceStructure,
    opts: config.EmOptions,
    seed: int,
    floor: float,
) -> _RunState:
    n = X.shape[0]
    pi_floor = 1.0 / (10.0 * n)

    init = _lloyd(X, K, seed, opts.kmeans_max_iter)
    resp = np.zeros((n, K))
    resp[np.arange(n), init.labels.zero_based] = 1.0
    scores = -np.sum((X - init.centers[init.labels.zero_based]) ** 2, axis=1)
    resp, reseeds, _ = _reseed_low_mass(resp, scores, pi_floor, 0, opts.max_reseeds)

    means, cov, pi = _m_step(X, resp, structure, floor, opts.fixed_variance)
    log_phi = log_component_densities(X, means, structure, cov)
    resp, row_ll = _e_step(log_phi, pi)
    ll = float(np.sum(row_ll))
    trace = [ll]
    converged = False
    n_iter = 0

    for it in range(1, opts.max_iter + 1):
        n_iter = it
        resp, reseeds, reseeded = _reseed_low_mass(resp, row_ll, pi_floor, reseeds, opts.max_reseeds)
        means, cov, pi = _m_step(X, resp, structure, floor, opts.fixed_variance)
        log_phi = log_component_densities(X, means, structure, cov)
        resp, row_ll = _e_step(log_phi, pi)
        new_ll = float(np.sum(row_ll))
        if not np.isfinite(new_ll):
            raise errors.DegenerateCluster(f"EM log-likelihood became non-finite at iteration {it}")
        if reseeded:
            # A reseed restarts the monotone sequence.
            trace = [new_ll]
            ll = new_ll
            continue
        trace.append(new_ll)
        if abs(new_ll - ll) <= opts.tol * max(abs(ll), 1.0):
            ll = new_ll
            converged = True
            break
        ll = new_ll

    if np.any(pi < pi_floor):
        k = int(np.argmin(pi))
        raise errors.DegenerateCluster(
            f"Component {k + 1} ended with mixing proportion {pi[k]:.3g} below 1/(10n)", component=k + 1
        )

    return _RunState(
        means=means,
        covariance=cov,
        pi=pi,
        log_phi=log_phi,
        resp=resp,
        row_ll=row_ll,
        trace=trace,
        n_iter=n_iter,
        converged=converged,
        n_reseeds=reseeds,
    )


def fit_mixture(
    view: ViewLike,
    K: int,
    structure: Union[models.CovarianceStructure, str] = models.CovarianceStructure.SPHERICAL_SHARED,
    opts: Optional[config.EmOptions] = None,
) -> models.MixtureFit:
    """
    Fit a K-component Gaussian mixture with a shared covariance by EM.

    Every restart starts from k-means++/Lloyd labels followed by one M-step; the restart with the
    highest log-likelihood wins (ties go to the earliest restart).
    """
    view = _as_view(view)
    structure = models.CovarianceStructure.parse(structure)
    opts = opts or config.EmOptions()
    X = view.data
    n, p = X.shape
    K = int(K)
    if K < 1 or K > n:
        raise errors.InputError(f"K must lie in 1..n (got K={K}, n={n}) for view '{view.view_id}'")
    if opts.fixed_variance is not None and structure is not models.CovarianceStructure.SPHERICAL_SHARED:
        raise ValueError("fixed_variance is only defined for the EII structure")

    floor = _variance_floor(X, opts.variance_floor)
    best: Optional[_RunState] = None
    best_restart = -1
    last_error: Optional[errors.NumericalError] = None

    for restart, seed in enumerate(_restart_seeds(opts.seed, opts.n_restarts)):
        try:
            state = _run_em(X, K, structure, opts, seed, floor)
        except errors.DegenerateCluster as exc:
            logger.debug(f"view={view.view_id} K={K} restart={restart} failed: {exc}")
            last_error = exc
            continue
        if best is None or state.trace[-1] > best.trace[-1]:
            best = state
            best_restart = restart

    if best is None:
        assert last_error is not None
        raise last_error

    loglik = float(np.sum(best.row_ll))
    n_params = models.n_mixture_params(K, p, structure)
    if not best.converged:
        logger.warning(f"EM for view '{view.view_id}' K={K} stopped at max_iter={opts.max_iter} without converging")
    logger.debug(
        f"view={view.view_id} K={K} structure={structure.value} loglik={loglik:.6f} "
        f"iters={best.n_iter} restart={best_restart}"
    )
    return models.MixtureFit(
        K=K,
        structure=structure,
        means=best.means,
        covariance=best.covariance,
        pi=best.pi,
        log_phi=best.log_phi,
        responsibilities=best.resp,
        loglik=loglik,
        n_params=n_params,
        bic=-2.0 * loglik + n_params * float(np.log(n)),
        aic=-2.0 * loglik + 2.0 * n_params,
        n_iter=best.n_iter,
        converged=best.converged,
        loglik_trace=tuple(best.trace),
        restart=best_restart,
        n_reseeds=best.n_reseeds,
    )


@dataclass(frozen=True)
class KSelection:
    K: int
    fit: models.MixtureFit
    criterion: models.SelectionCriterion
    # None marks a K whose fit failed.
    trace: Dict[int, Optional[float]]


def select_k_with_trace(
    view: ViewLike,
    k_range: Sequence[int],
    structure: Union[models.CovarianceStructure, str] = models.CovarianceStructure.SPHERICAL_SHARED,
    criterion: Union[models.SelectionCriterion, str] = models.SelectionCriterion.BIC,
    opts: Optional[config.EmOptions] = None,
    *,
    min_k_two: bool = False,
) -> KSelection:
    view = _as_view(view)
    criterion = models.SelectionCriterion(str(getattr(criterion, "value", criterion)).upper())
    lo, hi = int(min(k_range)), int(max(k_range))
    if min_k_two:
        lo = max(lo, 2)
    hi = min(hi, view.n)
    if lo > hi:
        raise errors.InputError(f"Empty K range for view '{view.view_id}' (lo={lo}, hi={hi}, n={view.n})")

    trace: Dict[int, Optional[float]] = {}
    best_fit: Optional[models.MixtureFit] = None
    best_value = np.inf
    for K in range(lo, hi + 1):
        try:
            fit = fit_mixture(view, K, structure, opts)
        except errors.NumericalError as exc:
            logger.warning(f"view '{view.view_id}': K={K} failed during selection ({exc})")
            trace[K] = None
            continue
        value = fit.criterion(criterion)
        trace[K] = value
        # Strict comparison keeps the smaller K on ties.
        if value < best_value:
            best_value = value
            best_fit = fit

    if best_fit is None:
        raise errors.AllFitsFailed(f"Every K in [{lo}, {hi}] failed for view '{view.view_id}'")
    logger.info(f"view '{view.view_id}': {criterion.value} selected K={best_fit.K} from [{lo}, {hi}]")
    return KSelection(K=best_fit.K, fit=best_fit, criterion=criterion, trace=trace)


def select_k(
    view: ViewLike,
    k_range: Sequence[int],
    structure: Union[models.CovarianceStructure, str] = models.CovarianceStructure.SPHERICAL_SHARED,
    criterion: Union[models.SelectionCriterion, str] = models.SelectionCriterion.BIC,
    opts: Optional[config.EmOptions] = None,
    *,
    min_k_two: bool = False,
) -> Tuple[int, models.MixtureFit]:
    sel = select_k_with_trace(view, k_range, structure, criterion, opts, min_k_two=min_k_two)
    return sel.K, sel.fit


def hard_labels(fit: Union[models.MixtureFit, np.ndarray]) -> models.HardLabels:
    resp = fit.responsibilities if isinstance(fit, models.MixtureFit) else np.asarray(fit, dtype=float)
    # np.argmax returns the first maximum, i.e. the lowest index on ties.
    return models.HardLabels(labels=np.argmax(resp, axis=1) + 1, n_clusters=int(resp.shape[1]))


def _fill_empty_clusters(X: np.ndarray, labels: np.ndarray, closest: np.ndarray, centers: np.ndarray) -> None:
    """Move the farthest point of a cluster with two or more members into each empty cluster, in place."""
    K = centers.shape[0]
    sizes = np.bincount(labels, minlength=K)
    for k in np.flatnonzero(sizes == 0):
        donors = np.flatnonzero((sizes[labels] > 1) & (closest > 0.0))
        if donors.size == 0:
            break
        far = int(donors[np.argmax(closest[donors])])
        sizes[labels[far]] -= 1
        sizes[k] += 1
        labels[far] = k
        closest[far] = 0.0
        centers[k] = X[far]


def _lloyd(X: np.ndarray, K: int, seed: int, max_iter: int) -> models.KMeansFit:
    n = X.shape[0]
    rows = np.arange(n)
    centers, _ = kmeans_plusplus(X, n_clusters=K, random_state=int(seed))
    centers = np.array(centers, dtype=float)
    prev: Optional[np.ndarray] = None
    trace: List[float] = []

    for _ in range(max_iter):
        dist = cdist(X, centers, "sqeuclidean")
        labels = np.argmin(dist, axis=1)
        closest = dist[rows, labels]
        _fill_empty_clusters(X, labels, closest, centers)
        trace.append(float(np.sum(closest)))
        if prev is not None and np.array_equal(labels, prev):
            break
        prev = labels
        for k in range(K):
            members = labels == k
            if np.any(members):
                centers[k] = X[members].mean(axis=0)

    inertia = float(np.sum((X - centers[labels]) ** 2))
    return models.KMeansFit(
        labels=models.HardLabels(labels=labels + 1, n_clusters=K),
        centers=centers,
        inertia=inertia,
        inertia_trace=tuple(trace),
    )


def kmeans_fit(view: ViewLike, K: int, opts: Optional[config.EmOptions] = None) -> models.KMeansFit:
    """Lloyd's algorithm from k-means++ seeds; the lowest-inertia restart wins."""
    view = _as_view(view)
    opts = opts or config.EmOptions()
    K = int(K)
    if K < 1 or K > view.n:
        raise errors.InputError(f"K must lie in 1..n (got K={K}, n={view.n}) for view '{view.view_id}'")
    best: Optional[models.KMeansFit] = None
    for seed in _restart_seeds(opts.seed, opts.n_restarts):
        run = _lloyd(view.data, K, seed, opts.kmeans_max_iter)
        if best is None or run.inertia < best.inertia:
            best = run
    assert best is not None
    return best


def kmeans(view: ViewLike, K: int, opts: Optional[config.EmOptions] = None) -> models.HardLabels:
    return kmeans_fit(view, K, opts).labels
