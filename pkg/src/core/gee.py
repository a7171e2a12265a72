"""
Second step: GEE with plug-in working matrices.

The working matrices are frozen at the first-step estimate and the
estimated nuisance parameters; the group quasi-score is solved by Fisher
scoring from the first-step coefficients. Inference uses a sandwich whose
meat kernel-weights cross-group score products by group distance.
"""

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from src.core.errors import DataValidationError, EstimationError, SingularMatrixError
from src.core.families import FamilySpec
from src.core.kernels import KernelKind, KernelSpec, default_bandwidth
from src.core.linalg import sandwich, solve_spd, symmetrize
from src.core.pooled_qmle import PqmleResult, intercept_column
from src.core.working_correlation import SpatialParams, WeightMatrixSet, WeightMode, build_weight_matrices
from src.entities.spatial_dataset import Dataset, GroupIndex, group_distance_matrix
from src.utils.log import get_logger

logger = get_logger("GEE")


@dataclass(frozen=True)
class GeeOptions:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 50
    mode: WeightMode = WeightMode.GENERIC
    kernel: KernelSpec = None


@dataclass(frozen=True)
class GeeResult:
    beta_hat: np.ndarray
    avar: np.ndarray
    se: np.ndarray
    iterations: int
    converged: bool
    score_norm: float
    first_step: PqmleResult
    spatial: SpatialParams
    kernel: KernelSpec
    family: FamilySpec
    objective: float = float("nan")
    naive_cov: np.ndarray = field(default=None, repr=False)
    weights: WeightMatrixSet = field(default=None, repr=False)

    @property
    def beta(self):
        return self.beta_hat

    def with_inference(self, avar, naive_cov=None):
        se = np.sqrt(np.maximum(np.diag(avar), 0.0))
        return replace(self, avar=avar, se=se,
                       naive_cov=naive_cov if naive_cov is not None else self.naive_cov)


@dataclass(frozen=True)
class PartialEffect:
    covariate: str
    kind: str
    estimate: float
    se: float
    jacobian: np.ndarray = field(repr=False, default=None)


def _check_alignment(gi: GroupIndex, wm: WeightMatrixSet):
    if len(wm) != gi.n_groups:
        raise DataValidationError(f"{len(wm)} working matrices for {gi.n_groups} groups", column="group_id")
    for g, members in enumerate(gi.groups):
        if wm.matrices[g].shape[0] != len(members):
            raise DataValidationError(f"working matrix of group {g} does not match its size", column="group_id")


def _group_terms(ds, gi, f, beta, wm):
    """Yields (members, D_g, u_g, W_g^-1 u_g, W_g^-1 D_g) per group."""
    eta = ds.X @ np.asarray(beta, dtype=float)
    m = f.mean(eta)
    dm = f.dmean(eta)
    u = ds.y - m
    for g, members in enumerate(gi.groups):
        d = ds.X[members] * dm[members][:, None]
        ug = u[members]
        yield members, d, ug, wm.solve(g, ug), wm.solve(g, d)


def gee_objective(ds: Dataset, gi: GroupIndex, f: FamilySpec, beta, wm: WeightMatrixSet) -> float:
    """(1/G) sum_g (y_g - m_g)' W_g^-1 (y_g - m_g)."""
    _check_alignment(gi, wm)
    total = 0.0
    eta = ds.X @ np.asarray(beta, dtype=float)
    u = ds.y - f.mean(eta)
    for g, members in enumerate(gi.groups):
        ug = u[members]
        total += float(ug @ wm.solve(g, ug))
    return total / gi.n_groups


def quasi_score(ds: Dataset, gi: GroupIndex, f: FamilySpec, beta, wm: WeightMatrixSet):
    """(1/G) sum_g D_g' W_g^-1 (y_g - m_g)."""
    _check_alignment(gi, wm)
    s = np.zeros(ds.p)
    for _, d, _, w_inv_u, _ in _group_terms(ds, gi, f, beta, wm):
        s += d.T @ w_inv_u
    return s / gi.n_groups


def _scoring_pieces(ds, gi, f, beta, wm):
    a = np.zeros((ds.p, ds.p))
    s = np.zeros(ds.p)
    for _, d, _, w_inv_u, w_inv_d in _group_terms(ds, gi, f, beta, wm):
        a += d.T @ w_inv_d
        s += d.T @ w_inv_u
    return symmetrize(a), s


def hessian_terms(ds: Dataset, gi: GroupIndex, f: FamilySpec, beta, wm: WeightMatrixSet):
    """
    Returns (H1, H2) with the working matrices frozen:
      H1 = (1/G) sum_g D_g' W_g^-1 D_g
      H2 = -(1/G) sum_g sum_l [W_g^-1 u_g]_l m''_l x_l x_l'
    The derivative of quasi_score in beta is -(H1 + H2).
    """
    _check_alignment(gi, wm)
    beta = np.asarray(beta, dtype=float)
    d2m = f.d2mean(ds.X @ beta)
    h1 = np.zeros((ds.p, ds.p))
    h2 = np.zeros((ds.p, ds.p))
    for members, d, _, w_inv_u, w_inv_d in _group_terms(ds, gi, f, beta, wm):
        h1 += d.T @ w_inv_d
        xg = ds.X[members]
        h2 -= (xg * (w_inv_u * d2m[members])[:, None]).T @ xg
    G = gi.n_groups
    return symmetrize(h1) / G, symmetrize(h2) / G


def resolve_kernel(ds: Dataset, kernel: KernelSpec = None, gi: GroupIndex = None) -> KernelSpec:
    """Bartlett unless a kind is given; a missing bandwidth follows the nearest-group rule."""
    if kernel is not None and kernel.bandwidth is not None:
        return kernel
    kind = kernel.kind if kernel is not None else KernelKind.BARTLETT
    return KernelSpec(kind, default_bandwidth(group_distance_matrix(ds, gi)))


@dataclass(frozen=True)
class ScoringTrace:
    beta: np.ndarray
    iterations: int
    converged: bool
    score_norm: float
    objective: float


def fisher_scoring(ds: Dataset, gi: GroupIndex, f: FamilySpec, start, wm: WeightMatrixSet,
                   opts: GeeOptions = GeeOptions()) -> ScoringTrace:
    """
    beta <- beta + (sum D'W^-1 D)^-1 sum D'W^-1 u with step-halving on the
    GEE objective. Converged when the score max-norm and the step are
    both <= tol.
    """
    _check_alignment(gi, wm)
    beta = np.array(start, dtype=float)
    current = gee_objective(ds, gi, f, beta, wm)
    converged = False
    iterations = 0
    score_norm = float("inf")
    for iterations in range(1, opts.max_iter + 1):
        a, s = _scoring_pieces(ds, gi, f, beta, wm)
        score_norm = float(np.max(np.abs(s))) / gi.n_groups
        step = solve_spd(a, s, what="GEE scoring matrix")
        if score_norm <= opts.tol and float(np.max(np.abs(step))) <= opts.tol:
            beta = beta + step
            current = gee_objective(ds, gi, f, beta, wm)
            converged = True
            break

        t = 1.0
        for _ in range(opts.max_halvings + 1):
            trial = beta + t * step
            try:
                value = gee_objective(ds, gi, f, trial, wm)
            except EstimationError:
                value = np.inf
            if np.isfinite(value) and value <= current + 1e-12 * abs(current):
                break
            t *= 0.5
        else:
            logger.warning("GEE step-halving exhausted at iteration %d", iterations)
            break

        delta = float(np.max(np.abs(trial - beta)))
        beta, current = trial, value
        logger.debug("iter %d: step %.3e, score %.3e, Q %.10g", iterations, delta, score_norm, current)
        _, s = _scoring_pieces(ds, gi, f, beta, wm)
        score_norm = float(np.max(np.abs(s))) / gi.n_groups
        if score_norm <= opts.tol and delta <= opts.tol:
            converged = True
            break
    return ScoringTrace(beta, iterations, converged, score_norm, current)


def gee_fit(ds: Dataset, gi: GroupIndex, f: FamilySpec, first: PqmleResult, sp: SpatialParams,
            opts: GeeOptions = GeeOptions()) -> GeeResult:
    if not first.converged:
        raise EstimationError("second step needs a converged first step")
    kernel = resolve_kernel(ds, opts.kernel, gi)
    wm = build_weight_matrices(ds, gi, f, first.beta_check, sp, opts.mode)
    trace = fisher_scoring(ds, gi, f, first.beta_check, wm, opts)
    beta, iterations, converged, score_norm = trace.beta, trace.iterations, trace.converged, trace.score_norm

    p = ds.p
    nan = np.full((p, p), np.nan)
    result = GeeResult(
        beta_hat=beta, avar=nan, se=np.full(p, np.nan), iterations=iterations, converged=converged,
        score_norm=score_norm, first_step=first, spatial=sp, kernel=kernel, family=f,
        objective=trace.objective, weights=wm,
    )
    if not converged:
        logger.warning("%s GEE did not converge (%d iterations, score %.3e)", f.name, iterations, score_norm)
        return result
    logger.info("%s GEE converged in %d iterations", f.name, iterations)
    a, _ = _scoring_pieces(ds, gi, f, beta, wm)
    naive = solve_spd(a, np.eye(p), what="GEE bread matrix")
    return result.with_inference(sandwich_avar(ds, gi, f, result, kernel), symmetrize(naive))


def group_scores(ds: Dataset, gi: GroupIndex, f: FamilySpec, beta, wm: WeightMatrixSet):
    """G x p matrix with rows s_g = D_g' W_g^-1 u_g."""
    return np.vstack([d.T @ w_inv_u for _, d, _, w_inv_u, _ in _group_terms(ds, gi, f, beta, wm)])


def sandwich_avar(ds: Dataset, gi: GroupIndex, f: FamilySpec, result: GeeResult, kernel: KernelSpec):
    """
    A^-1 B A^-1 with A = sum_g D_g' W_g^-1 D_g and
    B = sum_g s_g s_g' + sum_{h != g} k(d_gh) s_g s_h'.
    Already the covariance of beta_hat, so se = sqrt(diag).
    """
    if not result.converged:
        raise EstimationError("sandwich covariance requested for a GEE fit that did not converge")
    wm = result.weights
    _check_alignment(gi, wm)
    a, _ = _scoring_pieces(ds, gi, f, result.beta_hat, wm)
    scores = group_scores(ds, gi, f, result.beta_hat, wm)
    k = kernel.weights(group_distance_matrix(ds, gi)) if gi.n_groups > 1 else np.ones((1, 1))
    np.fill_diagonal(k, 1.0)
    meat = scores.T @ k @ scores
    return sandwich(a, meat, what="GEE bread matrix")


def _covariate_index(ds, which):
    if isinstance(which, str):
        if which not in ds.names:
            raise DataValidationError(f"unknown covariate '{which}'", column=which)
        return ds.names.index(which)
    j = int(which)
    if not 0 <= j < ds.p:
        raise DataValidationError(f"covariate index {j} out of range", column=str(which))
    return j


def partial_effects(f: FamilySpec, result, ds: Dataset, which, kind="continuous", base=0.0) -> PartialEffect:
    """
    Average partial effect of covariate `which` with delta-method s.e.

    continuous: mean_i m'(x_i b) b_j
    discrete:   mean_i [m(x_i b | x_j = base + 1) - m(x_i b | x_j = base)]
    `result` needs .beta and .avar.
    """
    j = _covariate_index(ds, which)
    beta = np.asarray(result.beta, dtype=float)
    X = ds.X
    if kind == "continuous":
        eta = X @ beta
        dm = f.dmean(eta)
        estimate = float(np.mean(dm) * beta[j])
        jac = (X * f.d2mean(eta)[:, None]).mean(axis=0) * beta[j]
        jac[j] += float(np.mean(dm))
    elif kind == "discrete":
        column = X[:, j]
        if not np.all(np.isin(column, (0.0, 1.0))):
            logger.warning("discrete partial effect requested for non-binary covariate '%s'", ds.names[j])
        x0 = X.copy()
        x0[:, j] = base
        x1 = X.copy()
        x1[:, j] = base + 1.0
        eta0, eta1 = x0 @ beta, x1 @ beta
        estimate = float(np.mean(f.mean(eta1) - f.mean(eta0)))
        jac = (x1 * f.dmean(eta1)[:, None] - x0 * f.dmean(eta0)[:, None]).mean(axis=0)
    else:
        raise DataValidationError(f"unknown partial-effect kind '{kind}' (valid: continuous, discrete)",
                                  column="kind")
    avar = np.asarray(result.avar, dtype=float)
    var = float(jac @ avar @ jac)
    return PartialEffect(covariate=ds.names[j], kind=kind, estimate=estimate,
                         se=float(np.sqrt(max(var, 0.0))), jacobian=jac)


def wald_test(beta, avar, exclude=None):
    """
    Joint chi-square test that every coefficient outside `exclude`
    (index or list of indices, typically the intercept) is zero.
    Returns (statistic, df, p-value).
    """
    beta = np.asarray(beta, dtype=float)
    if exclude is None:
        exclude = []
    elif np.isscalar(exclude):
        exclude = [int(exclude)]
    keep = [j for j in range(beta.size) if j not in set(exclude)]
    if not keep:
        raise DataValidationError("Wald test needs at least one tested coefficient", column="exclude")
    b = beta[keep]
    v = np.asarray(avar, dtype=float)[np.ix_(keep, keep)]
    try:
        stat = float(b @ solve_spd(v, b, what="Wald covariance"))
    except SingularMatrixError:
        logger.warning("Wald covariance singular; statistic not available")
        return float("nan"), len(keep), float("nan")
    return stat, len(keep), float(stats.chi2.sf(stat, len(keep)))


def slope_wald(ds: Dataset, beta, avar):
    """Wald test of all slopes, excluding the intercept column if there is one."""
    return wald_test(beta, avar, exclude=intercept_column(ds.X))
