from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

try:
    from .. import config, errors, models
except ImportError:  # pragma: no cover
    import config, errors, models  # type: ignore


logger = logging.getLogger(__name__)

# Allowed shortfall of the returned objective against the C = 11^T start.
_ASCENT_SLACK = 1e-10


def _check_simplex(pi: np.ndarray, name: str) -> np.ndarray:
    pi = np.asarray(pi, dtype=float).ravel()
    if pi.size == 0 or np.any(~np.isfinite(pi)) or np.any(pi <= 0):
        raise errors.MarginMismatch(f"{name} must be strictly positive")
    if abs(float(pi.sum()) - 1.0) > 1e-8:
        raise errors.MarginMismatch(f"{name} must sum to 1 (got {pi.sum():.12g})")
    return pi


def c_to_pi(C: np.ndarray, pi1: np.ndarray, pi2: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    return np.asarray(pi1, dtype=float)[:, None] * C * np.asarray(pi2, dtype=float)[None, :]


def pi_to_c(Pi: np.ndarray, pi1: np.ndarray, pi2: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """C_kk' = Pi_kk' / (pi1_k pi2_k'), after checking that Pi has the given margins."""
    Pi = np.asarray(Pi, dtype=float)
    pi1 = np.asarray(pi1, dtype=float).ravel()
    pi2 = np.asarray(pi2, dtype=float).ravel()
    if Pi.shape != (pi1.size, pi2.size):
        raise errors.MarginMismatch(f"Pi has shape {Pi.shape}, margins imply {(pi1.size, pi2.size)}")
    if np.any(pi1 <= 0) or np.any(pi2 <= 0):
        raise errors.MarginMismatch("Margins must be strictly positive")
    row_gap = float(np.max(np.abs(Pi.sum(axis=1) - pi1)))
    col_gap = float(np.max(np.abs(Pi.sum(axis=0) - pi2)))
    if row_gap > tol or col_gap > tol:
        raise errors.MarginMismatch(f"Pi margins differ from pi1/pi2 (row {row_gap:.3e}, column {col_gap:.3e})")
    return Pi / np.outer(pi1, pi2)


def coupling_residuals(coupling: models.Coupling) -> Dict[str, float]:
    C, pi1, pi2 = coupling.C, coupling.pi1, coupling.pi2
    Pi = coupling.Pi
    return {
        "c_rows": float(np.max(np.abs(C @ pi2 - 1.0))),
        "c_cols": float(np.max(np.abs(C.T @ pi1 - 1.0))),
        "pi_total": float(abs(Pi.sum() - 1.0)),
        "min_entry": float(np.min(Pi)),
    }


def _normalised_responsibilities(log_phi: np.ndarray, pi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    weighted = np.asarray(log_phi, dtype=float) + np.log(pi)[None, :]
    row = logsumexp(weighted, axis=1)
    return np.exp(weighted - row[:, None]), row


def _inner(resp1: np.ndarray, C: np.ndarray, resp2: np.ndarray) -> np.ndarray:
    # d_i = resp1_i^T C resp2_i
    return np.einsum("ik,kl,il->i", resp1, C, resp2)


def responsibility_objective(resp1: np.ndarray, resp2: np.ndarray, C: np.ndarray) -> float:
    """sum_i log(r1_i^T C r2_i); exactly 0 at C = 11^T for row-stochastic inputs."""
    d = _inner(resp1, C, resp2)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(d)))


def pseudo_loglik(log_phi1: np.ndarray, log_phi2: np.ndarray, coupling: models.Coupling) -> float:
    log_phi1 = np.atleast_2d(np.asarray(log_phi1, dtype=float))
    log_phi2 = np.atleast_2d(np.asarray(log_phi2, dtype=float))
    if log_phi1.shape[0] != log_phi2.shape[0]:
        raise ValueError(f"log_phi row counts differ ({log_phi1.shape[0]} vs {log_phi2.shape[0]})")
    if (log_phi1.shape[1], log_phi2.shape[1]) != coupling.shape:
        raise ValueError(f"Coupling shape {coupling.shape} does not match log_phi columns")
    resp1, a1 = _normalised_responsibilities(log_phi1, coupling.pi1)
    resp2, a2 = _normalised_responsibilities(log_phi2, coupling.pi2)
    d = _inner(resp1, coupling.C, resp2)
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        bad = int(np.sum(~(d > 0)))
        raise errors.NonFinite(f"Pseudo log-likelihood underflows to zero for {bad} observation(s)")
    return float(np.sum(a1 + a2) + np.sum(np.log(d)))


def _support_feasible(mask: np.ndarray, pi1: np.ndarray, pi2: np.ndarray) -> bool:
    """Does some non-negative matrix supported on `mask` have margins pi1, pi2?"""
    cells = np.argwhere(mask)
    K1, K2 = mask.shape
    A = np.zeros((K1 + K2, cells.shape[0]))
    for j, (k, l) in enumerate(cells):
        A[k, j] = 1.0
        A[K1 + l, j] = 1.0
    b = np.concatenate([pi1, pi2])
    res = linprog(np.zeros(cells.shape[0]), A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    return res.status == 0


def _sinkhorn(
    M: np.ndarray,
    pi1: np.ndarray,
    pi2: np.ndarray,
    tol: float,
    max_iter: int,
) -> Tuple[np.ndarray, np.ndarray, int]:
    M = np.asarray(M, dtype=float)
    pi1 = np.asarray(pi1, dtype=float).ravel()
    pi2 = np.asarray(pi2, dtype=float).ravel()
    if M.shape != (pi1.size, pi2.size):
        raise ValueError(f"M has shape {M.shape}, margins imply {(pi1.size, pi2.size)}")
    if np.any(M < 0) or not np.all(np.isfinite(M)):
        raise ValueError("M must be finite and non-negative")
    if abs(float(pi1.sum()) - float(pi2.sum())) > 1e-10:
        raise errors.MarginMismatch("Row and column targets must have the same total")
    if np.any(M == 0) and not _support_feasible(M > 0, pi1, pi2):
        raise errors.InfeasibleSupport("The zero pattern of M admits no matrix with the requested margins")

    u = np.ones(pi2.size)
    residual = np.inf
    for it in range(1, max_iter + 1):
        v = pi1 / (M @ u)
        u = pi2 / (M.T @ v)
        # Columns are exact after the u-update; rows carry the residual (relative to the target).
        rows = v * (M @ u)
        residual = float(np.max(np.abs(rows / pi1 - 1.0)))
        if residual <= tol:
            return u, v, it
    raise errors.NotConverged(max_iter, residual)


def sinkhorn_balance(
    M: np.ndarray,
    pi1: np.ndarray,
    pi2: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 10_000,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Scalings (u, v) such that diag(v) M diag(u) has row sums pi1 and column sums pi2.

    The pair is unique only up to (c*u, v/c); compare balanced matrices, not scalings.
    """
    u, v, _ = _sinkhorn(M, pi1, pi2, tol, max_iter)
    return u, v


def balanced(M: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.asarray(v)[:, None] * np.asarray(M, dtype=float) * np.asarray(u)[None, :]


def _gradient(resp1: np.ndarray, resp2: np.ndarray, C: np.ndarray, pi1: np.ndarray, pi2: np.ndarray) -> Tuple[np.ndarray, int]:
    d = _inner(resp1, C, resp2)
    keep = d > 0
    excluded = int(np.sum(~keep))
    w = np.zeros_like(d)
    w[keep] = 1.0 / d[keep]
    G = (resp1 * w[:, None]).T @ resp2
    return G / np.outer(pi1, pi2), excluded


def _eg_run(
    resp1: np.ndarray,
    resp2: np.ndarray,
    pi1: np.ndarray,
    pi2: np.ndarray,
    opts: config.EgOptions,
    step: float,
) -> models.Coupling:
    outer = np.outer(pi1, pi2)
    C = np.ones((pi1.size, pi2.size))
    start = responsibility_objective(resp1, resp2, C)
    best_C, best_value, best_iter = C, start, 0
    best_after_start = -np.inf
    sinkhorn_iters = 0
    excluded_total = 0
    converged = False
    stopped: Optional[str] = None
    it = 0

    for it in range(1, opts.max_outer_iter + 1):
        G, excluded = _gradient(resp1, resp2, C, pi1, pi2)
        excluded_total += excluded
        with np.errstate(divide="ignore"):
            log_M = np.log(C * outer) + step * G
        top = np.max(log_M)
        # exp(-700) is still a normal double, so M keeps the support of C.
        M = np.exp(np.maximum(log_M - top, -700.0))
        try:
            u, v, used = _sinkhorn(M, pi1, pi2, opts.sinkhorn_tol, opts.sinkhorn_max_iter)
        except errors.NotConverged as exc:
            if it == 1:
                raise
            # Near the boundary of the feasible set balancing stalls; the best balanced iterate stands.
            logger.info(f"EG stopped at iteration {it}: {exc}")
            sinkhorn_iters += exc.max_iter
            stopped = "sinkhorn"
            break
        sinkhorn_iters += used
        C_next = balanced(M, u, v) / outer

        value = responsibility_objective(resp1, resp2, C_next)
        best_after_start = max(best_after_start, value)
        if value > best_value:
            best_C, best_value, best_iter = C_next, value, it
        change = float(np.max(np.abs(C_next - C)))
        C = C_next
        logger.debug(f"eg iter={it} objective={value:.12g} change={change:.3e}")
        if change < opts.outer_tol:
            converged = True
            break

    if best_after_start < start - _ASCENT_SLACK:
        raise errors.StepTooLarge(step)
    if excluded_total:
        logger.warning(f"{excluded_total} observation-iteration(s) excluded from the gradient (zero denominator)")

    return models.Coupling(
        C=best_C,
        pi1=pi1,
        pi2=pi2,
        diagnostics={
            "eg_iterations": it,
            "eg_converged": converged,
            "eg_stopped": stopped or ("tolerance" if converged else "max_iter"),
            "best_iteration": best_iter,
            "sinkhorn_iterations": sinkhorn_iters,
            "step_size": step,
            "objective": best_value,
            "start_objective": start,
            "excluded_observations": excluded_total,
        },
    )


def estimate_c_from_responsibilities(
    resp1: np.ndarray,
    resp2: np.ndarray,
    pi1: np.ndarray,
    pi2: np.ndarray,
    opts: Optional[config.EgOptions] = None,
) -> models.Coupling:
    """
    Maximise sum_i log(r1_i^T C r2_i) over C with C pi2 = 1 and C^T pi1 = 1.

    Exponentiated-gradient steps from C = 11^T, each projected back by Sinkhorn balancing. The best
    iterate is returned, so the objective never falls below its value at the start. A run that
    never ascends is retried with half the step, up to `opts.max_halvings` times.
    """
    opts = opts or config.EgOptions()
    resp1 = np.atleast_2d(np.asarray(resp1, dtype=float))
    resp2 = np.atleast_2d(np.asarray(resp2, dtype=float))
    if resp1.shape[0] != resp2.shape[0]:
        raise ValueError(f"Responsibility row counts differ ({resp1.shape[0]} vs {resp2.shape[0]})")
    pi1 = _check_simplex(pi1, "pi1")
    pi2 = _check_simplex(pi2, "pi2")
    if resp1.shape[1] != pi1.size or resp2.shape[1] != pi2.size:
        raise ValueError("Responsibility columns do not match the margins")

    if pi1.size == 1 and pi2.size == 1:
        return models.Coupling(
            C=np.ones((1, 1)),
            pi1=pi1,
            pi2=pi2,
            diagnostics={"eg_iterations": 0, "eg_converged": True, "sinkhorn_iterations": 0, "objective": 0.0},
        )

    step = opts.resolve_step(resp1.shape[0])
    for halving in range(opts.max_halvings + 1):
        try:
            coupling = _eg_run(resp1, resp2, pi1, pi2, opts, step)
        except errors.StepTooLarge:
            if halving == opts.max_halvings:
                raise
            logger.info(f"EG did not ascend with step {step:.6g}; halving")
            step *= 0.5
            continue
        coupling.diagnostics["halvings"] = halving
        return coupling
    raise errors.StepTooLarge(step)  # pragma: no cover


def estimate_c(
    log_phi1: np.ndarray,
    log_phi2: np.ndarray,
    pi1: np.ndarray,
    pi2: np.ndarray,
    opts: Optional[config.EgOptions] = None,
) -> models.Coupling:
    pi1 = _check_simplex(pi1, "pi1")
    pi2 = _check_simplex(pi2, "pi2")
    resp1, _ = _normalised_responsibilities(np.atleast_2d(log_phi1), pi1)
    resp2, _ = _normalised_responsibilities(np.atleast_2d(log_phi2), pi2)
    return estimate_c_from_responsibilities(resp1, resp2, pi1, pi2, opts)


def independence_coupling(pi1: np.ndarray, pi2: np.ndarray) -> models.Coupling:
    pi1 = np.asarray(pi1, dtype=float).ravel()
    pi2 = np.asarray(pi2, dtype=float).ravel()
    return models.Coupling(C=np.ones((pi1.size, pi2.size)), pi1=pi1, pi2=pi2)
