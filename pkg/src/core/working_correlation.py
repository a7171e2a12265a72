"""
Spatial nuisance parameters and working covariance matrices.

The nuisance vector gamma = (tau2, rho) is estimated from first-step
residuals; the working matrices W_g = V_g^1/2 R_g V_g^1/2 (or the
structural Poisson covariance) are assembled per group and factored once.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import linalg
from scipy.optimize import minimize_scalar

from src.core.errors import (BadlyConditionedError, DataValidationError, EstimationError,
                             NoInformativePairsError)
from src.core.families import FamilySpec
from src.core.pooled_qmle import PqmleResult
from src.entities.spatial_dataset import Dataset, GroupIndex, within_group_pairs
from src.utils.log import get_logger

logger = get_logger("WorkingCorrelation")

# Distance-model correlations are kept inside [-MAX_CORR, MAX_CORR].
MAX_CORR = 1.0 - 1e-3
EXCHANGEABLE_EPS = 1e-3
RHO_MIN = 1e-6
RIDGE_START = 1e-8
RIDGE_LIMIT = 1e-2
_E_MINUS_1 = np.e - 1.0


class CorrelationKind(Enum):
    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    CRESSIE = "cressie"
    INVDIST = "invdist"
    EXPMINUS1 = "expminus1"

    @property
    def is_distance(self):
        return self in (CorrelationKind.CRESSIE, CorrelationKind.INVDIST, CorrelationKind.EXPMINUS1)


def distance_correlation(kind: CorrelationKind, d, rho):
    """
    Unclipped distance-decay correlation.
    cressie:   exp(-d/rho)
    invdist:   rho/d
    expminus1: (exp(rho/d) - 1)/(e - 1)
    Coincident points (d = 0) get correlation 1.
    """
    d = np.asarray(d, dtype=float)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        if kind is CorrelationKind.CRESSIE:
            out = np.exp(-d / rho) if rho > 0 else np.zeros_like(d)
        elif kind is CorrelationKind.INVDIST:
            out = rho / d
        elif kind is CorrelationKind.EXPMINUS1:
            out = np.expm1(rho / d) / _E_MINUS_1
        else:
            raise ValueError(f"{kind.value} is not a distance model")
    return np.where(d > 0, out, 1.0)


@dataclass(frozen=True)
class CorrelationModel:
    """kind plus its single parameter: pi for exchangeable, rho for the distance models."""

    kind: CorrelationKind = CorrelationKind.INDEPENDENCE
    param: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", CorrelationKind(self.kind))
        if not np.isfinite(self.param):
            raise DataValidationError(f"correlation parameter must be finite, got {self.param}",
                                      column="corr.param")
        if self.kind is CorrelationKind.CRESSIE and self.param <= 0.0:
            raise DataValidationError("Cressie rho must be > 0", column="corr.param")
        if self.kind is CorrelationKind.INVDIST and self.param < 0.0:
            raise DataValidationError("inverse-distance rho must be >= 0", column="corr.param")
        if self.kind is CorrelationKind.EXCHANGEABLE and not (-1.0 < self.param < 1.0):
            raise DataValidationError("exchangeable pi must lie in (-1, 1)", column="corr.param")

    @classmethod
    def independence(cls):
        return cls(CorrelationKind.INDEPENDENCE, 0.0)

    @classmethod
    def exchangeable(cls, pi):
        return cls(CorrelationKind.EXCHANGEABLE, float(pi))

    @classmethod
    def cressie(cls, rho):
        return cls(CorrelationKind.CRESSIE, float(rho))

    @classmethod
    def inverse_distance(cls, rho):
        return cls(CorrelationKind.INVDIST, float(rho))

    @classmethod
    def exp_minus_one(cls, rho):
        return cls(CorrelationKind.EXPMINUS1, float(rho))

    def correlation(self, d):
        """Off-diagonal correlation at distance d, before clipping."""
        d = np.asarray(d, dtype=float)
        if self.kind is CorrelationKind.INDEPENDENCE:
            return np.zeros_like(d)
        if self.kind is CorrelationKind.EXCHANGEABLE:
            return np.full_like(d, self.param)
        return distance_correlation(self.kind, d, self.param)

    def matrix(self, d):
        """
        Correlation matrix for a block of within-group distances.
        Returns (R, n_clipped).
        """
        d = np.asarray(d, dtype=float)
        r = self.correlation(d)
        clipped = 0
        if self.kind.is_distance:
            off = ~np.eye(d.shape[0], dtype=bool)
            outside = off & (np.abs(r) > MAX_CORR)
            clipped = int(outside.sum()) // 2
            r = np.clip(r, -MAX_CORR, MAX_CORR)
        np.fill_diagonal(r, 1.0)
        return r, clipped

    def to_dict(self):
        return {"kind": self.kind.value, "param": float(self.param)}


class WeightMode(Enum):
    POISSON_STRUCTURAL = "poisson-structural"
    GENERIC = "generic"


class WorkingModel(Enum):
    """Working-model choices as named on the command line."""

    INDEPENDENCE = "independence"
    EXCHANGEABLE = "exchangeable"
    CRESSIE = "cressie"
    INVDIST = "invdist"
    EXPMINUS1 = "expminus1"
    POISSON_STRUCTURAL = "poisson-structural"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown working model '{value}' (valid: {valid})",
                                      column="working") from e

    @property
    def correlation_kind(self):
        if self is WorkingModel.POISSON_STRUCTURAL:
            return CorrelationKind.EXPMINUS1
        return CorrelationKind(self.value)

    @property
    def weight_mode(self):
        if self is WorkingModel.POISSON_STRUCTURAL:
            return WeightMode.POISSON_STRUCTURAL
        return WeightMode.GENERIC


class RhoEstimator(Enum):
    DIRECT = "direct"
    LSQ = "lsq"
    PRENTICE = "prentice"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown rho estimator '{value}' (valid: {valid})",
                                      column="rho_estimator") from e


@dataclass(frozen=True)
class SpatialParams:
    tau2: float = 0.0
    corr: CorrelationModel = field(default_factory=CorrelationModel.independence)

    def __post_init__(self):
        if not np.isfinite(self.tau2):
            raise DataValidationError(f"tau2 must be finite, got {self.tau2}", column="tau2")
        object.__setattr__(self, "tau2", max(float(self.tau2), 0.0))

    def to_dict(self):
        return {"tau2": self.tau2, "corr": self.corr.to_dict()}


@dataclass(frozen=True)
class RhoFit:
    """Outcome of a scalar rho search or the direct moment estimator."""

    rho: float
    objective: float = float("nan")
    n_pairs: int = 0
    n_skipped: int = 0
    degenerate: bool = False
    at_boundary: bool = False
    tau2: float = None


@dataclass(frozen=True)
class WeightMatrixSet:
    matrices: tuple
    factors: tuple
    variances: tuple
    mode: WeightMode
    n_repaired: int = 0
    n_clipped: int = 0

    def __len__(self):
        return len(self.matrices)

    def solve(self, g, rhs):
        """W_g^-1 rhs through the stored Cholesky factor."""
        return linalg.cho_solve(self.factors[g], rhs)

    def scaled(self, c):
        """Every W_g multiplied by c > 0."""
        return build_from_matrices([c * w for w in self.matrices], [c * v for v in self.variances],
                                   self.mode)


# -- nuisance estimators ---------------------------------------------------

def estimate_tau2(res: PqmleResult) -> float:
    """
    No-intercept OLS slope of (u^2 - m) on m^2 from the Poisson first step,
    clamped at 0.
    """
    m = np.asarray(res.fitted_means, dtype=float)
    a = res.residuals ** 2 - m
    b = m * m
    denom = float(b @ b)
    if denom <= 0.0 or not np.isfinite(denom):
        raise EstimationError("all fitted means are zero; tau2 is not identified")
    slope = float(a @ b) / denom
    if slope < 0.0:
        logger.info("tau2 slope %.4g < 0 (underdispersion); clamped to 0", slope)
    return max(slope, 0.0)


def _pairs(ds: Dataset, pairs):
    if pairs == "within":
        i, j, _ = within_group_pairs(ds)
        return i, j
    if pairs == "all":
        return np.triu_indices(ds.n, k=1)
    raise DataValidationError(f"unknown pair set '{pairs}' (valid: within, all)", column="rho_pairs")


def estimate_rho_direct(res: PqmleResult, ds: Dataset, pairs="within") -> RhoFit:
    """
    Average of log(u_i u_j / (m_i m_j) + 1) * d_ij over pairs i != j.
    Each unordered pair stands for both orders, which contribute equally.
    """
    i, j = _pairs(ds, pairs)
    if i.size == 0:
        raise NoInformativePairsError("no observation pairs available for the direct rho estimator")
    u, m = res.residuals, res.fitted_means
    arg = u[i] * u[j] / (m[i] * m[j]) + 1.0
    ok = arg > 0.0
    skipped = int(np.sum(~ok))
    if not ok.any():
        raise NoInformativePairsError(
            f"no informative pairs: all {i.size} log arguments are <= 0")
    if skipped:
        logger.warning("direct rho estimator skipped %d of %d pairs with non-positive log argument",
                       skipped, i.size)
    d = ds.distances[i[ok], j[ok]]
    rho = float(np.mean(np.log(arg[ok]) * d))
    return RhoFit(rho=rho, n_pairs=int(ok.sum()), n_skipped=skipped)


def _lsq_objective(products, d, kind, scale):
    def objective(rho):
        fitted = scale * np.clip(distance_correlation(kind, d, rho), -MAX_CORR, MAX_CORR)
        return float(np.sum((products - fitted) ** 2))
    return objective


def _scalar_search(objective, lo, hi, grid_points=201):
    """
    Global grid scan on [lo, hi] followed by bounded Brent refinement
    on the cells around the best grid point.
    Returns (x, value, degenerate, at_boundary).
    """
    grid = np.geomspace(lo, hi, grid_points) if lo > 0 else np.linspace(lo, hi, grid_points)
    values = np.array([objective(r) for r in grid])
    spread = values.max() - values.min()
    if spread <= 1e-14 * (1.0 + abs(values.min())):
        mid = 0.5 * (lo + hi)
        return mid, objective(mid), True, False

    k = int(np.argmin(values))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, grid_points - 1)]
    out = minimize_scalar(objective, bounds=(a, b), method="bounded",
                          options={"xatol": 1e-12 * max(1.0, b), "maxiter": 500})
    candidates = [(float(out.fun), float(out.x)), (float(values[k]), float(grid[k])),
                  (float(values[0]), float(lo)), (float(values[-1]), float(hi))]
    value, x = min(candidates)
    width = hi - lo
    at_boundary = x - lo <= 1e-6 * width or hi - x <= 1e-6 * width
    return x, value, False, at_boundary


def estimate_rho_lsq(products, distances, kind: CorrelationKind, rho_max=None, scale=1.0) -> RhoFit:
    """
    argmin_rho sum (p_k - scale * C(d_k, rho))^2 over the supplied pairs.
    products are standardized residual products (scale 1) or
    u_i u_j / (m_i m_j) with scale tau2 for the structural count model.
    """
    kind = CorrelationKind(kind)
    if not kind.is_distance:
        raise ValueError(f"{kind.value} has no rho to search over")
    products = np.asarray(products, dtype=float)
    d = np.asarray(distances, dtype=float)
    if products.size == 0:
        raise NoInformativePairsError("no within-group pairs for the rho search")
    if rho_max is None:
        rho_max = 10.0 * float(d.max()) if d.size and d.max() > 0 else 10.0
    rho_max = max(rho_max, 10.0 * RHO_MIN)

    rho, value, degenerate, at_boundary = _scalar_search(
        _lsq_objective(products, d, kind, scale), RHO_MIN, rho_max)
    if degenerate:
        logger.warning("rho objective is flat on [%.1e, %.3g]; using the bracket midpoint", RHO_MIN, rho_max)
    elif at_boundary:
        logger.warning("rho estimate %.6g sits on the search bracket boundary", rho)
    return RhoFit(rho=rho, objective=value, n_pairs=int(products.size), degenerate=degenerate,
                  at_boundary=at_boundary)


def within_group_products(res: PqmleResult, ds: Dataset):
    """Standardized residual products r_l r_m and distances over within-group pairs."""
    i, j, _ = within_group_pairs(ds)
    r = res.std_residuals
    return r[i] * r[j], ds.distances[i, j]


def exchangeable_bounds(max_size):
    lo = -1.0 / (max_size - 1) + EXCHANGEABLE_EPS if max_size > 1 else -1.0 + EXCHANGEABLE_EPS
    return lo, 1.0 - EXCHANGEABLE_EPS


def estimate_exchangeable(res: PqmleResult, gi: GroupIndex) -> float:
    """Mean within-group product of standardized residuals, clamped so R_g stays PD."""
    r = res.std_residuals
    total, count = 0.0, 0
    for members in gi.groups:
        size = len(members)
        if size < 2:
            continue
        rg = r[members]
        s = float(rg.sum())
        total += 0.5 * (s * s - float(rg @ rg))
        count += size * (size - 1) // 2
    if count == 0:
        raise NoInformativePairsError("exchangeable correlation needs at least one group with two members")
    pi = total / count
    lo, hi = exchangeable_bounds(gi.max_size)
    clamped = min(max(pi, lo), hi)
    if clamped != pi:
        logger.info("exchangeable pi %.4g clamped to %.4g", pi, clamped)
    return clamped


def prentice_fit(res: PqmleResult, gi: GroupIndex, model: WorkingModel, ds: Dataset = None) -> SpatialParams:
    """
    Least squares match of the within-group residual cross-products to
    their model counterparts, over the nuisance parameters of `model`.

    Structural count model: u_l u_m / (m_l m_m) against tau2 c(d, rho),
    with tau2 profiled out in closed form for every rho.
    """
    model = WorkingModel.parse(model)
    f = res.family
    tau2 = estimate_tau2(res) if f.is_count else 0.0
    if model is WorkingModel.INDEPENDENCE:
        return SpatialParams(tau2, CorrelationModel.independence())
    if model is WorkingModel.EXCHANGEABLE:
        return SpatialParams(tau2, CorrelationModel.exchangeable(estimate_exchangeable(res, gi)))
    if ds is None:
        raise ValueError("distance working models need the dataset for pair distances")

    if model is WorkingModel.POISSON_STRUCTURAL:
        i, j, _ = within_group_pairs(ds)
        if i.size == 0:
            raise NoInformativePairsError("no within-group pairs for the structural fit")
        u, m = res.residuals, res.fitted_means
        e = u[i] * u[j] / (m[i] * m[j])
        d = ds.distances[i, j]
        kind = CorrelationKind.EXPMINUS1

        def profiled(rho):
            c = np.clip(distance_correlation(kind, d, rho), -MAX_CORR, MAX_CORR)
            t = max(float(e @ c) / float(c @ c), 0.0) if c @ c > 0 else 0.0
            return t, float(np.sum((e - t * c) ** 2))

        rho_max = 10.0 * float(d.max()) if d.max() > 0 else 10.0
        rho, _, degenerate, _ = _scalar_search(lambda r: profiled(r)[1], RHO_MIN, rho_max)
        if degenerate:
            logger.warning("structural (tau2, rho) objective is flat; using the bracket midpoint")
        tau2, _ = profiled(rho)
        return SpatialParams(tau2, CorrelationModel.exp_minus_one(rho))

    products, d = within_group_products(res, ds)
    fit = estimate_rho_lsq(products, d, model.correlation_kind)
    return SpatialParams(tau2, CorrelationModel(model.correlation_kind, fit.rho))


# -- working matrices ------------------------------------------------------

def _ridge_factor(w, g):
    """Cholesky of w, adding lambda*I (doubling from 1e-8 * max diag) until it succeeds."""
    try:
        return w, linalg.cho_factor(w, lower=True), 0
    except linalg.LinAlgError:
        pass
    scale = float(np.max(np.diag(w)))
    limit = RIDGE_LIMIT * scale
    lam = RIDGE_START * scale
    eye = np.eye(w.shape[0])
    while lam <= limit:
        repaired = w + lam * eye
        try:
            return repaired, linalg.cho_factor(repaired, lower=True), 1
        except linalg.LinAlgError:
            lam *= 2.0
    raise BadlyConditionedError(
        f"working matrix of group {g} badly conditioned: ridge repair exceeded {RIDGE_LIMIT:g} x max diagonal")


def build_from_matrices(matrices, variances, mode, n_clipped=0):
    out_w, factors, repairs = [], [], 0
    for g, w in enumerate(matrices):
        w = 0.5 * (w + w.T)
        w, factor, repaired = _ridge_factor(w, g)
        repairs += repaired
        out_w.append(w)
        factors.append(factor)
    if repairs:
        logger.warning("ridge-repaired %d working matrices", repairs)
    return WeightMatrixSet(matrices=tuple(out_w), factors=tuple(factors),
                           variances=tuple(np.asarray(v, dtype=float) for v in variances),
                           mode=mode, n_repaired=repairs, n_clipped=n_clipped)


def build_weight_matrices(ds: Dataset, gi: GroupIndex, f: FamilySpec, beta, sp: SpatialParams,
                          mode: WeightMode = WeightMode.GENERIC) -> WeightMatrixSet:
    """
    structural: v_l = m_l (1 + m_l tau2), r_lm = m_l m_m tau2 c(d_lm, rho)
    generic:    V^1/2 R V^1/2 with the family's LEF variances
    """
    mode = WeightMode(mode)
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise DataValidationError("non-finite coefficient in working-matrix construction", column="beta")
    if mode is WeightMode.POISSON_STRUCTURAL and not f.is_count:
        raise DataValidationError("the structural Poisson covariance needs a count family", column="working")

    eta = ds.X @ beta
    m_all = f.mean(eta)
    matrices, variances, clipped = [], [], 0
    for members in gi.groups:
        m = m_all[members]
        d = ds.distances[np.ix_(members, members)]
        r, n_clip = sp.corr.matrix(d)
        clipped += n_clip
        if mode is WeightMode.POISSON_STRUCTURAL:
            v = m * (1.0 + m * sp.tau2)
            w = sp.tau2 * np.outer(m, m) * r
            np.fill_diagonal(w, v)
        else:
            v = f.variance(m)
            s = np.sqrt(v)
            w = s[:, None] * r * s[None, :]
            np.fill_diagonal(w, v)
        matrices.append(w)
        variances.append(v)
    if clipped:
        logger.warning("clipped %d working correlations into [-%.3f, %.3f]", clipped, MAX_CORR, MAX_CORR)
    return build_from_matrices(matrices, variances, mode, n_clipped=clipped)
