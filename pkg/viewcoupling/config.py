from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

REPO_ROOT = Path(__file__).resolve().parent.parent

_TRUTHY = {"1", "true", "yes", "y", "on"}
_FALSY = {"0", "false", "no", "n", "off", ""}


def load_env_file(path: Optional[Path] = None) -> bool:
    """
    Load the optional `.env` next to the repository root.

    Process env wins (override=False) so CI/container settings are not clobbered.
    """
    env_path = Path(path) if path else REPO_ROOT / ".env"
    if not env_path.exists():
        return False
    return load_dotenv(dotenv_path=str(env_path), override=False)


def _env_bool(name: str, default: bool = False) -> bool:
    raw = os.getenv(name)
    if raw is None:
        return default
    val = str(raw).strip().lower()
    if val in _TRUTHY:
        return True
    if val in _FALSY:
        return False
    return default


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return int(str(raw).strip())
    except Exception:
        return default


def _env_float(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None:
        return default
    try:
        return float(str(raw).strip())
    except Exception:
        return default


@dataclass(frozen=True)
class EmOptions:
    max_iter: int = 500
    tol: float = 1e-8
    n_restarts: int = 10
    seed: int = 0
    # Relative to the mean per-feature variance of the view.
    variance_floor: float = 1e-8
    max_reseeds: int = 1
    kmeans_max_iter: int = 300
    # Test hook: pin sigma^2 for EII fits (means and proportions still re-estimated).
    fixed_variance: Optional[float] = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")
        if self.max_reseeds < 0:
            raise ValueError("max_reseeds must be >= 0")
        if self.fixed_variance is not None and not self.fixed_variance > 0:
            raise ValueError("fixed_variance must be positive when set")


@dataclass(frozen=True)
class EgOptions:
    # None means 1/n for the problem at hand.
    step_size: Optional[float] = None
    max_outer_iter: int = 5000
    outer_tol: float = 1e-7
    sinkhorn_max_iter: int = 10_000
    sinkhorn_tol: float = 1e-10
    max_halvings: int = 8

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.max_outer_iter < 1 or self.sinkhorn_max_iter < 1:
            raise ValueError("iteration limits must be >= 1")
        if not (self.outer_tol > 0 and self.sinkhorn_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_halvings < 0:
            raise ValueError("max_halvings must be >= 0")

    def resolve_step(self, n: int) -> float:
        return float(self.step_size) if self.step_size is not None else 1.0 / max(int(n), 1)


def load_em_options_from_env(seed: int = 0) -> EmOptions:
    return EmOptions(
        max_iter=max(1, _env_int("MVI_EM_MAX_ITER", 500)),
        tol=max(1e-15, _env_float("MVI_EM_TOL", 1e-8)),
        n_restarts=max(1, min(_env_int("MVI_EM_RESTARTS", 10), 200)),
        seed=seed,
    )


def load_eg_options_from_env() -> EgOptions:
    return EgOptions(
        max_outer_iter=max(1, _env_int("MVI_EG_MAX_ITER", 5000)),
        outer_tol=max(1e-15, _env_float("MVI_EG_TOL", 1e-7)),
        sinkhorn_max_iter=max(1, _env_int("MVI_SINKHORN_MAX_ITER", 10_000)),
        sinkhorn_tol=max(1e-15, _env_float("MVI_SINKHORN_TOL", 1e-10)),
    )


def resolve_threads(cli_value: Optional[int] = None) -> int:
    """--threads wins, then MVI_THREADS, then every available core."""
    if cli_value is not None and int(cli_value) > 0:
        return int(cli_value)
    env_threads = _env_int("MVI_THREADS", 0)
    if env_threads > 0:
        return env_threads
    return max(1, os.cpu_count() or 1)


def resolve_log_level(verbose: bool = False) -> int:
    if verbose:
        return logging.DEBUG
    name = str(os.getenv("MVI_LOG_LEVEL", "INFO")).strip().upper()
    level = logging.getLevelName(name)
    return level if isinstance(level, int) else logging.INFO


@dataclass(frozen=True)
class IndependenceOptions:
    """Everything `test_independence` needs besides the two views."""

    # "fixed" uses k1/k2; "BIC"/"AIC" select from [k_min, k_max].
    k_policy: str = "fixed"
    k1: Optional[int] = None
    k2: Optional[int] = None
    k_min: int = 1
    k_max: int = 9
    min_k_two: bool = False
    structure: str = "EII"
    B: int = 200
    seed: int = 0
    alpha: float = 0.05
    add_one: bool = False
    threads: int = 1
    em: EmOptions = field(default_factory=EmOptions)
    eg: EgOptions = field(default_factory=EgOptions)

    def __post_init__(self):
        policy = str(self.k_policy).strip().upper()
        if policy not in ("FIXED", "BIC", "AIC"):
            raise ValueError(f"k_policy must be fixed, BIC or AIC (got {self.k_policy!r})")
        object.__setattr__(self, "k_policy", "fixed" if policy == "FIXED" else policy)
        if self.k_policy == "fixed" and (self.k1 is None or self.k2 is None):
            raise ValueError("k_policy=fixed needs both k1 and k2")
        if self.k_min < 1 or self.k_max < self.k_min:
            raise ValueError("k range must satisfy 1 <= k_min <= k_max")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
