from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

try:
    from . import config, errors
except ImportError:  # pragma: no cover
    import config, errors  # type: ignore


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [part.strip() for part in value.split(",") if part.strip()]
    return value


class RunConfig(BaseModel):
    """Options shared by every command. Config-file keys are the field names (case-insensitive)."""

    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    structure: Literal["EII", "EEI", "EEE"] = "EII"

    em_max_iter: int = Field(500, ge=1)
    em_tol: float = Field(1e-8, gt=0)
    em_restarts: int = Field(10, ge=1)
    variance_floor: float = Field(1e-8, gt=0)

    eg_step_size: Optional[float] = Field(None, gt=0)
    eg_max_iter: int = Field(5000, ge=1)
    eg_tol: float = Field(1e-7, gt=0)
    sinkhorn_tol: float = Field(1e-10, gt=0)
    sinkhorn_max_iter: int = Field(10_000, ge=1)

    @field_validator("structure", mode="before")
    @classmethod
    def _upper_structure(cls, value: Any) -> Any:
        return str(value).strip().upper() if value is not None else value

    def em_options(self) -> config.EmOptions:
        return config.EmOptions(
            max_iter=self.em_max_iter,
            tol=self.em_tol,
            n_restarts=self.em_restarts,
            seed=self.seed,
            variance_floor=self.variance_floor,
        )

    def eg_options(self) -> config.EgOptions:
        return config.EgOptions(
            step_size=self.eg_step_size,
            max_outer_iter=self.eg_max_iter,
            outer_tol=self.eg_tol,
            sinkhorn_max_iter=self.sinkhorn_max_iter,
            sinkhorn_tol=self.sinkhorn_tol,
        )


class InputConfig(RunConfig):
    id_col: Optional[str] = None
    standardize: bool = False
    impute_mean: bool = False
    max_missing: Optional[float] = Field(None, ge=0.0, le=1.0)


class SelectionConfig(InputConfig):
    k_policy: Literal["fixed", "BIC", "AIC"] = "fixed"
    k_min: int = Field(1, ge=1)
    k_max: int = Field(9, ge=1)
    min_k_two: bool = False

    @field_validator("k_policy", mode="before")
    @classmethod
    def _normalise_policy(cls, value: Any) -> Any:
        text = str(value).strip()
        return "fixed" if text.lower() == "fixed" else text.upper()

    @model_validator(mode="after")
    def _check_range(self) -> "SelectionConfig":
        if self.k_max < self.k_min:
            raise ValueError("k_max must be >= k_min")
        return self


class TestConfig(SelectionConfig):
    __test__ = False

    k1: Optional[int] = Field(None, ge=1)
    k2: Optional[int] = Field(None, ge=1)
    B: int = Field(200, ge=1)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    add_one: bool = False

    @model_validator(mode="after")
    def _check_fixed(self) -> "TestConfig":
        if self.k_policy == "fixed" and (self.k1 is None or self.k2 is None):
            raise ValueError("k_policy=fixed needs k1 and k2")
        return self

    def independence_options(self, threads: int) -> config.IndependenceOptions:
        return config.IndependenceOptions(
            k_policy=self.k_policy,
            k1=self.k1,
            k2=self.k2,
            k_min=self.k_min,
            k_max=self.k_max,
            min_k_two=self.min_k_two,
            structure=self.structure,
            B=self.B,
            seed=self.seed,
            alpha=self.alpha,
            add_one=self.add_one,
            threads=threads,
            em=self.em_options(),
            eg=self.eg_options(),
        )


class PairsConfig(TestConfig):
    @model_validator(mode="before")
    @classmethod
    def _default_k2(cls, data: Any) -> Any:
        # One K for every view under k_policy=fixed.
        if isinstance(data, dict) and data.get("k1") is not None and data.get("k2") is None:
            data = {**data, "k2": data["k1"]}
        return data


class FitConfig(SelectionConfig):
    k: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check_fixed(self) -> "FitConfig":
        if self.k_policy == "fixed" and self.k is None:
            raise ValueError("k_policy=fixed needs k")
        return self


class SimulateConfig(RunConfig):
    design: str = "K6_P10"
    family: Literal["SPHERICAL", "DENSE_SHARED", "DENSE_DIAG", "STUDENT_T"] = "SPHERICAL"
    sigma: float = Field(2.4, ge=0.0)
    delta: float = Field(0.0, ge=0.0, le=1.0)
    n: int = Field(100, ge=2)
    df: float = Field(3.0, gt=0.0)
    # CSV of custom mean matrices; takes the place of `design` when set.
    means_file: Optional[str] = None

    @field_validator("design", "family", mode="before")
    @classmethod
    def _upper(cls, value: Any) -> Any:
        return str(value).strip().upper() if value is not None else value


class PowerConfig(RunConfig):
    designs: List[str] = Field(default_factory=lambda: ["K6_P10"])
    family: Literal["SPHERICAL", "DENSE_SHARED", "DENSE_DIAG", "STUDENT_T"] = "SPHERICAL"
    ns: List[int] = Field(default_factory=lambda: [100])
    sigmas: List[float] = Field(default_factory=list)
    deltas: List[float] = Field(default_factory=lambda: [0.0, 0.3, 0.6, 0.9, 1.0])
    k_fits: List[str] = Field(default_factory=list)
    methods: List[Literal["PLRT", "GTestChiSq", "GTestPerm", "ARIPerm"]] = Field(default_factory=lambda: ["PLRT"])
    reps: int = Field(500, ge=1)
    B: int = Field(100, ge=1)
    alpha: float = Field(0.05, gt=0.0, lt=1.0)
    df: float = Field(3.0, gt=0.0)
    full_scale: bool = False

    @field_validator("designs", "ns", "sigmas", "deltas", "k_fits", "methods", mode="before")
    @classmethod
    def _lists(cls, value: Any) -> Any:
        return _split_list(value)

    @field_validator("designs", mode="after")
    @classmethod
    def _upper_designs(cls, value: List[str]) -> List[str]:
        return [v.upper() for v in value]

    @field_validator("deltas", mode="after")
    @classmethod
    def _delta_range(cls, value: List[float]) -> List[float]:
        if any(not 0.0 <= d <= 1.0 for d in value):
            raise ValueError("every delta must lie in [0, 1]")
        return value

    @field_validator("family", mode="before")
    @classmethod
    def _upper_family(cls, value: Any) -> Any:
        return str(value).strip().upper() if value is not None else value

    @model_validator(mode="after")
    def _scale(self) -> "PowerConfig":
        if self.full_scale:
            self.reps, self.B = 2000, 200
        return self


ConfigT = TypeVar("ConfigT", bound=RunConfig)


def read_config_file(path: Optional[Union[str, Path]]) -> Dict[str, Any]:
    """KEY=VALUE lines (dotenv syntax, '#' comments); keys are lower-cased to field names."""
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise errors.ConfigError(f"Config file not found: {p}")
    values = dotenv_values(p)
    return {str(k).strip().lower(): v for k, v in values.items() if v is not None and str(v).strip() != ""}


def env_defaults() -> Dict[str, Any]:
    """Solver settings from MVI_* environment variables."""
    em = config.load_em_options_from_env()
    eg = config.load_eg_options_from_env()
    return {
        "em_max_iter": em.max_iter,
        "em_tol": em.tol,
        "em_restarts": em.n_restarts,
        "eg_max_iter": eg.max_outer_iter,
        "eg_tol": eg.outer_tol,
        "sinkhorn_tol": eg.sinkhorn_tol,
        "sinkhorn_max_iter": eg.sinkhorn_max_iter,
    }


def load_run_config(cls: Type[ConfigT], path: Optional[Union[str, Path]], overrides: Dict[str, Any]) -> ConfigT:
    """Environment first, then the config file, then CLI flags that were actually given."""
    # Field names are matched case-insensitively so `B` and `b` both work.
    names = {name.lower(): name for name in cls.model_fields}
    from_file = {names.get(k, k): v for k, v in read_config_file(path).items()}
    merged = {**env_defaults(), **from_file, **{k: v for k, v in overrides.items() if v is not None}}
    return cls.model_validate(merged)


# --- Result documents ---


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class StatisticDoc(_Doc):
    statistic: Optional[float]
    p_value: Optional[float] = Field(None, ge=0.0, le=1.0)
    p_value_kind: Literal["permutation", "chi_square"]
    B: Optional[int] = None
    df: Optional[int] = None


class PlrtDoc(StatisticDoc):
    effective_rank: Optional[float] = None
    Pi: List[List[float]]
    C: List[List[float]]
    pi1: List[float]
    pi2: List[float]
    diagnostics: Dict[str, Any] = Field(default_factory=dict)


class FitSummaryDoc(_Doc):
    view_id: str
    K: int
    structure: str
    loglik: float
    bic: float
    aic: float
    n_params: int
    n_iter: int
    converged: bool
    selection: Optional[Dict[str, Optional[float]]] = None


class BaselinesDoc(_Doc):
    g_test_chisq: Optional[StatisticDoc] = None
    g_test_perm: StatisticDoc
    mutual_information: float
    ari: StatisticDoc
    errors: Dict[str, str] = Field(default_factory=dict)


class TestResultDoc(_Doc):
    __test__ = False

    schema_version: Literal[1] = 1
    command: Literal["test", "pairs"]
    view1: str
    view2: str
    n: int
    K1: int
    K2: int
    k_policy: str
    alpha: float
    rejected: bool
    plrt: PlrtDoc
    contingency_table: List[List[int]]
    baselines: BaselinesDoc
    fits: List[FitSummaryDoc]
    provenance: Dict[str, Any] = Field(default_factory=dict)


class FitResultDoc(_Doc):
    schema_version: Literal[1] = 1
    command: Literal["fit"] = "fit"
    fit: FitSummaryDoc
    pi: List[float]
    means: List[List[float]]
    covariance: Union[List[float], List[List[float]]]
    labels: List[int]
    provenance: Dict[str, Any] = Field(default_factory=dict)
