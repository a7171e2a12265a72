"""Small dense solves shared by the estimators."""

import numpy as np
from scipy import linalg

from src.core.errors import SingularMatrixError
from src.utils.log import get_logger

logger = get_logger("Linalg")

# Reciprocal condition number below which a bread/scoring matrix counts as singular.
RCOND_MIN = 1e-14


def solve_spd(a, b, what="matrix"):
    """Solves a x = b for symmetric positive definite a via Cholesky."""
    a = np.asarray(a, dtype=float)
    try:
        factor = linalg.cho_factor(a, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as e:
        raise SingularMatrixError(f"{what} is singular or not positive definite") from e
    diag = np.abs(np.diag(factor[0]))
    if diag.min() ** 2 < RCOND_MIN * diag.max() ** 2:
        raise SingularMatrixError(f"{what} is numerically singular")
    return linalg.cho_solve(factor, b)


def symmetrize(m):
    return 0.5 * (m + m.T)


def sandwich(bread, meat, what="bread matrix"):
    """
    bread^-1 meat bread^-1, symmetrised. Negative eigenvalues (possible
    when the meat carries kernel-weighted cross terms) are floored at 0.
    """
    bread_inv = solve_spd(bread, np.eye(bread.shape[0]), what=what)
    out = symmetrize(bread_inv @ meat @ bread_inv)
    vals, vecs = np.linalg.eigh(out)
    if vals.min() < -1e-12 * max(np.abs(vals).max(), 1e-300):
        logger.warning("sandwich covariance had eigenvalue %.3e < 0; flooring at 0", vals.min())
        out = symmetrize((vecs * np.maximum(vals, 0.0)) @ vecs.T)
    return out
