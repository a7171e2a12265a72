"""
First step: pooled (partial) quasi-MLE.

Newton-type iterations with the expected information of the LEF
quasi-likelihood and step-halving, followed by residual extraction and
the spatial-HAC robust variance of the pooled estimator.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from src.core.errors import DivergenceError, EstimationError, RankDeficiencyError, SingularMatrixError
from src.core.families import FamilySpec
from src.core.kernels import KernelSpec
from src.core.linalg import sandwich, solve_spd
from src.entities.spatial_dataset import Dataset
from src.utils.log import get_logger

logger = get_logger("PooledQMLE")

# |x'b| beyond this for a whole outcome class marks probit separation.
SEPARATION_INDEX = 30.0


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 50
    start: tuple = None


@dataclass(frozen=True)
class PqmleResult:
    beta_check: np.ndarray
    iterations: int
    converged: bool
    score_norm: float
    loglik: float
    residuals: np.ndarray
    std_residuals: np.ndarray
    fitted_means: np.ndarray
    fitted_variances: np.ndarray
    family: FamilySpec
    separation: bool = False
    info: np.ndarray = field(default=None, repr=False)

    @property
    def beta(self):
        return self.beta_check


def intercept_column(X):
    """Index of the first all-ones column, or None."""
    ones = np.where(np.all(X == 1.0, axis=0))[0]
    return int(ones[0]) if ones.size else None


def check_full_rank(X, names=None):
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < X.shape[1]:
        dependent = sorted(int(j) for j in piv[rank:])
        if names:
            dependent = [names[j] for j in dependent]
        raise RankDeficiencyError(dependent)


def _pooled_pieces(f, X, y, beta):
    eta = X @ beta
    m = f.mean(eta)
    v = f.variance(m)
    dm = f.dmean(eta)
    score = X.T @ (dm * (y - m) / v)
    info = (X * (dm * dm / v)[:, None]).T @ X
    return eta, m, v, score, info


def _objective(f, y, X, beta):
    try:
        value = float(np.sum(f.quasi_loglik(y, X @ beta)))
    except EstimationError:
        return -np.inf
    return value if np.isfinite(value) else -np.inf


def _separated(f, y, eta):
    if f.is_count:
        return False
    for cls in (0.0, 1.0):
        members = eta[y == cls]
        if members.size and np.all(np.abs(members) > SEPARATION_INDEX):
            return True
    return False


def start_values(ds: Dataset, f: FamilySpec):
    beta = np.zeros(ds.p)
    j = intercept_column(ds.X)
    if j is not None:
        beta[j] = f.start_intercept(float(ds.y.mean()))
    return beta


def fit_pqmle(ds: Dataset, f: FamilySpec, opts: SolverOptions = SolverOptions()) -> PqmleResult:
    ds.check_response(f.response_kind)
    X, y, n = ds.X, ds.y, ds.n
    check_full_rank(X, ds.names)

    beta = np.array(opts.start, dtype=float) if opts.start is not None else start_values(ds, f)
    current = _objective(f, y, X, beta)
    if not np.isfinite(current):
        raise DivergenceError("pooled quasi-likelihood is not finite at the starting values")

    converged = separated = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        eta, m, v, score, info = _pooled_pieces(f, X, y, beta)
        try:
            step = solve_spd(info, score, what="pooled information matrix")
        except SingularMatrixError:
            logger.warning("information matrix singular at iteration %d", iterations)
            break

        t = 1.0
        trial_value = -np.inf
        for _ in range(opts.max_halvings + 1):
            trial = beta + t * step
            trial_value = _objective(f, y, X, trial)
            if trial_value >= current - 1e-12 * abs(current):
                break
            t *= 0.5
        else:
            if not np.isfinite(trial_value):
                raise DivergenceError(
                    f"non-finite pooled quasi-likelihood after {opts.max_halvings} halvings")
            logger.debug("no ascent after %d halvings; stopping", opts.max_halvings)
            trial = beta
            trial_value = current

        delta = float(np.max(np.abs(trial - beta)))
        beta, current = trial, trial_value
        _, _, _, score, _ = _pooled_pieces(f, X, y, beta)
        score_norm = float(np.max(np.abs(score)))
        logger.debug("iter %d: step %.3e, score %.3e, objective %.8f", iterations, delta, score_norm, current)

        if _separated(f, y, X @ beta):
            separated = True
            logger.warning("complete separation detected (|x'b| > %.0f for a whole class)", SEPARATION_INDEX)
            break
        if max(delta, score_norm / n) <= opts.tol:
            converged = True
            break
        if delta == 0.0:
            break

    eta, m, v, score, info = _pooled_pieces(f, X, y, beta)
    score_norm = float(np.max(np.abs(score)))
    converged = converged and score_norm <= opts.tol * n
    u = y - m
    result = PqmleResult(
        beta_check=beta,
        iterations=iterations,
        converged=converged,
        score_norm=score_norm,
        loglik=float(np.sum(f.loglik(y, eta))),
        residuals=u,
        std_residuals=u / np.sqrt(v),
        fitted_means=m,
        fitted_variances=v,
        family=f,
        separation=separated,
        info=info,
    )
    if converged:
        logger.info("%s pooled QMLE converged in %d iterations", f.name, iterations)
    else:
        logger.warning("%s pooled QMLE did not converge (%d iterations, score %.3e)",
                       f.name, iterations, score_norm)
    return result


def pooled_scores(ds: Dataset, f: FamilySpec, beta):
    """n x p matrix of per-observation quasi-scores."""
    eta = ds.X @ beta
    m = f.mean(eta)
    return ds.X * (f.dmean(eta) * (ds.y - m) / f.variance(m))[:, None]


def robust_avar_pqmle(ds: Dataset, f: FamilySpec, res: PqmleResult, kernel: KernelSpec):
    """
    Spatial-HAC sandwich for the pooled estimator:
    A^-1 (sum_i sum_j k(d_ij) s_i s_j') A^-1 with A = sum_i grad m_i' grad m_i / v_i.
    Own-observation terms always carry weight 1.
    """
    if not res.converged:
        raise EstimationError("robust variance requested for a first step that did not converge")
    beta = res.beta_check
    eta = ds.X @ beta
    m = f.mean(eta)
    dm = f.dmean(eta)
    v = f.variance(m)
    bread = (ds.X * (dm * dm / v)[:, None]).T @ ds.X
    scores = pooled_scores(ds, f, beta)
    weights = kernel.weights(ds.distances)
    np.fill_diagonal(weights, 1.0)
    meat = scores.T @ weights @ scores
    return sandwich(bread, meat, what="pooled bread matrix")
