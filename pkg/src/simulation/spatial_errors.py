"""
Spatially correlated error fields: SAR innovations (I - rho W)^-1 eps
and multivariate normal draws with a given correlation matrix.
"""

import numpy as np
from scipy import linalg

from src.core.errors import CorrelationRepairError, DataValidationError, SingularSystemError
from src.simulation.random_streams import standard_normal
from src.utils.log import get_logger

logger = get_logger("SpatialErrors")

MAX_CONDITION = 1e12
EIGEN_FLOOR = 1e-8
MAX_REPAIR = 0.05


def equal_weight_block(size):
    """(J - I)/(L - 1): every neighbour in the group weighted equally, rows sum to 1."""
    if size < 2:
        return np.zeros((size, size))
    return (np.ones((size, size)) - np.eye(size)) / (size - 1)


def inverse_distance_block(d, rho, divisor=6.0):
    """rho / (divisor d_lm) off the diagonal, 0 on it."""
    d = np.asarray(d, dtype=float)
    off = ~np.eye(d.shape[0], dtype=bool)
    out = np.zeros_like(d)
    out[off] = rho / (divisor * d[off])
    return out


def inverse_distance_correlation(d, rho):
    """Unit diagonal, rho / d_ij elsewhere."""
    out = inverse_distance_block(d, rho, divisor=1.0)
    np.fill_diagonal(out, 1.0)
    return out


def _system(w, rho):
    w = np.asarray(w, dtype=float)
    m = np.eye(w.shape[0]) - rho * w
    try:
        condition = np.linalg.cond(m)
    except np.linalg.LinAlgError:
        condition = np.inf
    if not np.isfinite(condition) or condition > MAX_CONDITION:
        raise SingularSystemError(rho, condition)
    return m


def sar_error(W, rho, eps):
    """Solves (I - rho W) x = eps directly."""
    eps = np.asarray(eps, dtype=float)
    if rho == 0.0:
        return eps.copy()
    m = _system(W, rho)
    return linalg.solve(m, eps)


class BlockSar:
    """
    SAR operator for a block-diagonal W. Each block inverse
    A_g = (I - rho W_g)^-1 is formed once and reused across draws.
    """

    def __init__(self, groups, blocks, rho):
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        self.rho = float(rho)
        self.n = int(sum(len(g) for g in self.groups))
        self.inverses = []
        for g, w in zip(self.groups, blocks):
            m = _system(w, self.rho)
            self.inverses.append(linalg.solve(m, np.eye(len(g))))

    def apply(self, eps):
        eps = np.asarray(eps, dtype=float)
        out = np.empty_like(eps)
        for members, a in zip(self.groups, self.inverses):
            out[members] = a @ eps[members]
        return out

    def variances(self):
        """Var of each output entry for unit-variance iid input: sum_j A_ij^2."""
        out = np.empty(self.n)
        for members, a in zip(self.groups, self.inverses):
            out[members] = np.sum(a * a, axis=1)
        return out


def nearest_correlation(sigma):
    """
    Eigenvalues floored at EIGEN_FLOOR, then rescaled to unit diagonal.
    Returns (repaired, largest absolute entry change).
    """
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    fixed = (vecs * np.maximum(vals, EIGEN_FLOOR)) @ vecs.T
    scale = 1.0 / np.sqrt(np.diag(fixed))
    fixed = fixed * scale[:, None] * scale[None, :]
    fixed = 0.5 * (fixed + fixed.T)
    np.fill_diagonal(fixed, 1.0)
    return fixed, float(np.max(np.abs(fixed - sigma)))


class MvnSampler:
    """Draws N(mean, sigma) through a Cholesky factor computed once."""

    def __init__(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
            raise DataValidationError("correlation matrix must be square", column="sigma")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise DataValidationError("correlation matrix must be symmetric", column="sigma")
        if not np.allclose(np.diag(sigma), 1.0):
            raise DataValidationError("correlation matrix must have a unit diagonal", column="sigma")
        self.repair = 0.0
        try:
            self.factor = linalg.cholesky(sigma, lower=True)
        except linalg.LinAlgError:
            repaired, change = nearest_correlation(sigma)
            if change > MAX_REPAIR:
                raise CorrelationRepairError(
                    f"correlation matrix far from PD: repair changed an entry by {change:.4f}")
            logger.warning("correlation matrix not PD; nearest-PD repair changed entries by up to %.3e", change)
            self.repair = change
            self.factor = linalg.cholesky(repaired, lower=True)

    @property
    def n(self):
        return self.factor.shape[0]

    def draw(self, rng, mean=0.0):
        return mean + self.factor @ standard_normal(rng, self.n)


def mvn_sample(sigma, rng):
    return MvnSampler(sigma).draw(rng)
