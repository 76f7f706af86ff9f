from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

try:
    from .errors import NonFiniteInput
except ImportError:  # pragma: no cover
    from errors import NonFiniteInput  # type: ignore


@dataclass(frozen=True, eq=False)
class DataView:
    data: np.ndarray
    view_id: str = "view"
    feature_names: Optional[List[str]] = None

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        if arr.ndim != 2:
            raise ValueError(f"View '{self.view_id}' must be a 2-D matrix, got ndim={arr.ndim}")
        n, p = arr.shape
        if n < 2 or p < 1:
            raise ValueError(f"View '{self.view_id}' needs n >= 2 and p >= 1 (got n={n}, p={p})")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteInput(f"View '{self.view_id}' contains non-finite entries")
        if self.feature_names is not None and len(self.feature_names) != p:
            raise ValueError(f"View '{self.view_id}' has {p} columns but {len(self.feature_names)} feature names")
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def p(self) -> int:
        return int(self.data.shape[1])

    def take_rows(self, index: np.ndarray) -> "DataView":
        return DataView(self.data[np.asarray(index)], view_id=self.view_id, feature_names=self.feature_names)


class CovarianceStructure(str, enum.Enum):
    SPHERICAL_SHARED = "EII"
    DIAGONAL_SHARED = "EEI"
    DENSE_SHARED = "EEE"

    def n_cov_params(self, p: int) -> int:
        if self is CovarianceStructure.SPHERICAL_SHARED:
            return 1
        if self is CovarianceStructure.DIAGONAL_SHARED:
            return p
        return p * (p + 1) // 2

    @classmethod
    def parse(cls, value: Any) -> "CovarianceStructure":
        if isinstance(value, cls):
            return value
        key = str(value or "").strip().upper()
        aliases = {
            "EII": cls.SPHERICAL_SHARED,
            "SPHERICAL": cls.SPHERICAL_SHARED,
            "SPHERICALSHARED": cls.SPHERICAL_SHARED,
            "EEI": cls.DIAGONAL_SHARED,
            "DIAGONAL": cls.DIAGONAL_SHARED,
            "DIAGONALSHARED": cls.DIAGONAL_SHARED,
            "EEE": cls.DENSE_SHARED,
            "DENSE": cls.DENSE_SHARED,
            "DENSESHARED": cls.DENSE_SHARED,
        }
        if key not in aliases:
            raise ValueError(f"Unknown covariance structure: {value!r}")
        return aliases[key]


class SelectionCriterion(str, enum.Enum):
    BIC = "BIC"
    AIC = "AIC"


def n_mixture_params(K: int, p: int, structure: CovarianceStructure) -> int:
    return K * p + (K - 1) + structure.n_cov_params(p)


@dataclass(frozen=True, eq=False)
class MixtureFit:
    K: int
    structure: CovarianceStructure
    means: np.ndarray
    # EII: shape (1,) holding sigma^2; EEI: shape (p,); EEE: shape (p, p).
    covariance: np.ndarray
    pi: np.ndarray
    log_phi: np.ndarray
    responsibilities: np.ndarray
    loglik: float
    n_params: int
    bic: float
    aic: float
    n_iter: int = 0
    converged: bool = True
    loglik_trace: Tuple[float, ...] = ()
    restart: int = 0
    n_reseeds: int = 0

    @property
    def n(self) -> int:
        return int(self.log_phi.shape[0])

    def criterion(self, which: SelectionCriterion) -> float:
        return self.bic if which is SelectionCriterion.BIC else self.aic

    @property
    def p(self) -> int:
        return int(self.means.shape[1])

    def covariance_matrix(self) -> np.ndarray:
        p = self.p
        if self.structure is CovarianceStructure.SPHERICAL_SHARED:
            return float(self.covariance[0]) * np.eye(p)
        if self.structure is CovarianceStructure.DIAGONAL_SHARED:
            return np.diag(self.covariance)
        return np.array(self.covariance, copy=True)


@dataclass(frozen=True, eq=False)
class HardLabels:
    # 1-based cluster ids in {1, ..., n_clusters}.
    labels: np.ndarray
    n_clusters: int

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=int).ravel()
        if arr.size and (arr.min() < 1 or arr.max() > self.n_clusters):
            raise ValueError(f"labels must lie in 1..{self.n_clusters}")
        object.__setattr__(self, "labels", arr)

    @property
    def n(self) -> int:
        return int(self.labels.size)

    @property
    def zero_based(self) -> np.ndarray:
        return self.labels - 1


@dataclass(frozen=True, eq=False)
class KMeansFit:
    labels: HardLabels
    centers: np.ndarray
    inertia: float
    inertia_trace: Tuple[float, ...] = ()


@dataclass(frozen=True, eq=False)
class Coupling:
    C: np.ndarray
    pi1: np.ndarray
    pi2: np.ndarray
    diagnostics: Dict[str, Any] = field(default_factory=dict)

    @property
    def Pi(self) -> np.ndarray:
        return self.pi1[:, None] * self.C * self.pi2[None, :]

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.C.shape[0]), int(self.C.shape[1])


@dataclass(frozen=True, eq=False)
class ContingencyTable:
    N: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.N)
        if arr.ndim != 2 or np.any(arr < 0):
            raise ValueError("Contingency table must be a non-negative 2-D matrix")
        object.__setattr__(self, "N", arr.astype(np.int64))

    @property
    def n(self) -> int:
        return int(self.N.sum())

    @property
    def row_sums(self) -> np.ndarray:
        return self.N.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.N.sum(axis=0)


class PValueKind(str, enum.Enum):
    PERMUTATION = "permutation"
    CHI_SQUARE = "chi_square"


@dataclass(frozen=True, eq=False)
class TestResult:
    __test__ = False  # keep pytest from collecting this as a test class

    statistic: float
    p_value: float
    p_value_kind: PValueKind
    B: Optional[int] = None
    df: Optional[int] = None
    effective_rank: Optional[float] = None
    diagnostics: Dict[str, Any] = field(default_factory=dict)
    coupling: Optional[Coupling] = None
    null_statistics: Optional[np.ndarray] = None


@dataclass(frozen=True)
class HardAssignmentReport:
    hard_statistic: float
    g2_half: float
    n_mutual_information: float
    gap: float
    holds: bool


# --- Simulation designs ---


@dataclass(frozen=True, eq=False)
class CouplingDesign:
    K: int
    delta: float

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= float(self.delta) <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        # Exact rational check that every row and column of Pi sums to 1/K.
        K = self.K
        d = Fraction(self.delta)
        off = (1 - d) / (K * K)
        diag = off + d / K
        row = diag + (K - 1) * off
        if row != Fraction(1, K):
            raise ValueError(f"Coupling design rows do not sum to 1/{K}")

    @property
    def Pi(self) -> np.ndarray:
        K = self.K
        d = float(self.delta)
        return (1.0 - d) / (K * K) * np.ones((K, K)) + d / K * np.eye(K)


@dataclass(frozen=True, eq=False)
class MeanCatalogEntry:
    id: str
    # K x p, one row per component.
    mu1: np.ndarray
    mu2: np.ndarray
    description: str = ""

    @property
    def K(self) -> int:
        return int(self.mu1.shape[0])

    @property
    def p1(self) -> int:
        return int(self.mu1.shape[1])

    @property
    def p2(self) -> int:
        return int(self.mu2.shape[1])


class FamilyKind(str, enum.Enum):
    GAUSSIAN_SPHERICAL = "gaussian_spherical"
    GAUSSIAN_SHARED = "gaussian_shared"
    STUDENT_T = "student_t"


@dataclass(frozen=True, eq=False)
class ComponentFamily:
    kind: FamilyKind
    sigma: Optional[float] = None
    # Per-view covariance (Gaussian) or scale (Student-t) matrices.
    cov1: Optional[np.ndarray] = None
    cov2: Optional[np.ndarray] = None
    df: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind is FamilyKind.GAUSSIAN_SPHERICAL:
            if self.sigma is None or self.sigma < 0:
                raise ValueError("Spherical family needs sigma >= 0")
            return
        for name in ("cov1", "cov2"):
            mat = getattr(self, name)
            if mat is None:
                raise ValueError(f"{self.kind.value} family needs {name}")
            mat = np.asarray(mat, dtype=float)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T):
                raise ValueError(f"{name} must be a symmetric square matrix")
            if np.linalg.eigvalsh(mat).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
            object.__setattr__(self, name, mat)
        if self.kind is FamilyKind.STUDENT_T and (self.df is None or self.df <= 0):
            raise ValueError("Student-t family needs df > 0")

    def fit_structure(self) -> CovarianceStructure:
        if self.kind is FamilyKind.GAUSSIAN_SPHERICAL:
            return CovarianceStructure.SPHERICAL_SHARED
        any_diag = any(np.allclose(m, np.diag(np.diag(m))) for m in (self.cov1, self.cov2))
        if self.kind is FamilyKind.GAUSSIAN_SHARED and any_diag:
            return CovarianceStructure.DIAGONAL_SHARED
        return CovarianceStructure.DENSE_SHARED


@dataclass(frozen=True, eq=False)
class SimDesign:
    coupling: CouplingDesign
    means: MeanCatalogEntry
    family: ComponentFamily
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.means.K != self.coupling.K:
            raise ValueError(f"Mean catalog entry {self.means.id} has K={self.means.K}, design has K={self.coupling.K}")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        fam = self.family
        if fam.kind is not FamilyKind.GAUSSIAN_SPHERICAL:
            if fam.cov1.shape[0] != self.means.p1 or fam.cov2.shape[0] != self.means.p2:
                raise ValueError("Covariance dimensions do not match the mean matrices")


@dataclass(frozen=True, eq=False)
class IndependenceReport:
    view1_id: str
    view2_id: str
    n: int
    fit1: MixtureFit
    fit2: MixtureFit
    plrt: TestResult
    table: ContingencyTable
    g_test_chisq: Optional[TestResult]
    g_test_perm: TestResult
    mutual_information: float
    ari: TestResult
    k_policy: str = "fixed"
    # Per-K criterion values when K was selected; None marks a failed K.
    selection1: Optional[Dict[int, Optional[float]]] = None
    selection2: Optional[Dict[int, Optional[float]]] = None
    baseline_errors: Dict[str, str] = field(default_factory=dict)

    @property
    def K1(self) -> int:
        return self.fit1.K

    @property
    def K2(self) -> int:
        return self.fit2.K
