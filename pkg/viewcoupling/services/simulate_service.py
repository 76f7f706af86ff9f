from __future__ import annotations

import logging
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

try:
    from .. import models
except ImportError:  # pragma: no cover
    import models  # type: ignore


logger = logging.getLogger(__name__)

_WARNED_STUDENT_DF = False


def sample_latent_pairs(
    design: models.CouplingDesign,
    n: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """i.i.d. (z1, z2) draws over the K x K cells of Pi, 1-based."""
    K = design.K
    probs = design.Pi.ravel()
    cells = rng.choice(K * K, size=int(n), p=probs / probs.sum())
    return cells // K + 1, cells % K + 1


def _noise(
    family: models.ComponentFamily,
    cov: Optional[np.ndarray],
    n: int,
    p: int,
    rng: np.random.Generator,
) -> np.ndarray:
    if family.kind is models.FamilyKind.GAUSSIAN_SPHERICAL:
        return float(family.sigma) * rng.standard_normal((n, p))
    chol = linalg.cholesky(cov, lower=True)
    Z = rng.standard_normal((n, p)) @ chol.T
    if family.kind is models.FamilyKind.GAUSSIAN_SHARED:
        return Z
    # Student-t as a Gaussian scale mixture: Z / sqrt(W / nu), W ~ chi^2_nu.
    nu = float(family.df)
    W = rng.chisquare(nu, size=n)
    return Z / np.sqrt(W / nu)[:, None]


def _warn_student_df(df: float) -> None:
    global _WARNED_STUDENT_DF
    if not _WARNED_STUDENT_DF:
        logger.warning(f"Student-t degrees of freedom are a free choice for this design; using nu={df:g}")
        _WARNED_STUDENT_DF = True


def sample_views(
    design: models.SimDesign,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[models.DataView, models.DataView, models.HardLabels, models.HardLabels]:
    """
    Draw both views given latent labels; the views are conditionally independent given (z1, z2).

    Draw order is latent pairs, then view-1 noise, then view-2 noise, so a seed fixes the dataset.
    The returned labels are the true memberships (diagnostics only).
    """
    rng = rng if rng is not None else np.random.default_rng(design.seed)
    fam = design.family
    if fam.kind is models.FamilyKind.STUDENT_T:
        _warn_student_df(float(fam.df))
    n = design.n
    z1, z2 = sample_latent_pairs(design.coupling, n, rng)
    mu1, mu2 = design.means.mu1, design.means.mu2
    X1 = mu1[z1 - 1] + _noise(fam, fam.cov1, n, mu1.shape[1], rng)
    X2 = mu2[z2 - 1] + _noise(fam, fam.cov2, n, mu2.shape[1], rng)
    K = design.coupling.K
    return (
        models.DataView(X1, view_id="view1"),
        models.DataView(X2, view_id="view2"),
        models.HardLabels(z1, K),
        models.HardLabels(z2, K),
    )
