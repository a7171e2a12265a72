"""
Two-step workflow on one dataset: pooled QMLE, nuisance estimation from
its residuals, then GEE with the plug-in working matrices.

The estimator memoises first steps so that a request for several
estimators (say PQMLE and GEE for both count families) fits every
pooled model once.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.baseline.ols_loglinear import ols_loglinear
from src.core.errors import DataValidationError, EstimationError
from src.core.families import FamilyKind, FamilySpec
from src.core.gee import GeeOptions, gee_fit, resolve_kernel, slope_wald
from src.core.kernels import KernelSpec
from src.core.pooled_qmle import PqmleResult, SolverOptions, fit_pqmle, robust_avar_pqmle
from src.core.working_correlation import (RHO_MIN, CorrelationKind, CorrelationModel, RhoEstimator,
                                          SpatialParams, WorkingModel, estimate_exchangeable,
                                          estimate_rho_direct, estimate_rho_lsq, estimate_tau2, prentice_fit,
                                          within_group_products)
from src.entities.spatial_dataset import Dataset, within_group_pairs
from src.utils.log import get_logger

logger = get_logger("TwoStep")


class EstimatorName(Enum):
    OLS = "ols"
    PQMLE_POISSON = "pqmle-poisson"
    GEE_POISSON = "gee-poisson"
    PQMLE_NB2 = "pqmle-nb2"
    GEE_NB2 = "gee-nb2"
    PQMLE_PROBIT = "pqmle-probit"
    GEE_PROBIT = "gee-probit"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown estimator '{value}' (valid: {valid})", column="estimators") from e

    @property
    def family(self):
        if self is EstimatorName.OLS:
            return None
        return FamilyKind.parse(self.value.split("-", 1)[1])

    @property
    def is_gee(self):
        return self.value.startswith("gee-")

    @property
    def label(self):
        return {"ols": "OLS", "pqmle-poisson": "Poisson", "gee-poisson": "GEE-poisson",
                "pqmle-nb2": "NB", "gee-nb2": "GEE-nb2", "pqmle-probit": "Probit",
                "gee-probit": "GEE-probit"}[self.value]


COUNT_ESTIMATORS = (EstimatorName.OLS, EstimatorName.PQMLE_POISSON, EstimatorName.GEE_POISSON,
                    EstimatorName.PQMLE_NB2, EstimatorName.GEE_NB2)
PROBIT_ESTIMATORS = (EstimatorName.PQMLE_PROBIT, EstimatorName.GEE_PROBIT)


def default_estimators(family):
    return PROBIT_ESTIMATORS if FamilyKind.parse(family) is FamilyKind.PROBIT else COUNT_ESTIMATORS


@dataclass(frozen=True)
class PipelineOptions:
    working: WorkingModel = WorkingModel.EXCHANGEABLE
    rho_estimator: RhoEstimator = None
    rho_pairs: str = "within"
    kernel: KernelSpec = None
    solver: SolverOptions = SolverOptions()
    nb2_exponent: int = 2
    inference: bool = True

    def __post_init__(self):
        object.__setattr__(self, "working", WorkingModel.parse(self.working))
        if self.rho_estimator is not None:
            object.__setattr__(self, "rho_estimator", RhoEstimator.parse(self.rho_estimator))
        if self.rho_pairs not in ("within", "all"):
            raise DataValidationError(f"unknown pair set '{self.rho_pairs}' (valid: within, all)",
                                      column="rho_pairs")


@dataclass(frozen=True)
class Estimate:
    """One estimator's column of a results table."""

    name: EstimatorName
    names: tuple
    beta: np.ndarray
    se: np.ndarray
    avar: np.ndarray
    converged: bool
    iterations: int = 0
    n_obs: int = 0
    loglik: float = float("nan")
    wald: tuple = (float("nan"), 0, float("nan"))
    details: dict = field(default_factory=dict)


def estimate_spatial_params(first: PqmleResult, ds: Dataset, working, rho_estimator=None,
                            rho_pairs="within", tau2=None) -> SpatialParams:
    """
    Nuisance parameters for the chosen working model. Defaults:
    exchangeable -> moment estimator; cressie/invdist/expminus1 -> least
    squares on within-group standardized residual products;
    poisson-structural -> direct estimator with the exp-minus-one model.
    """
    working = WorkingModel.parse(working)
    f = first.family
    if tau2 is None:
        tau2 = estimate_tau2(first) if f.is_count else 0.0
    gi = ds.group_index

    if rho_estimator is RhoEstimator.PRENTICE:
        sp = prentice_fit(first, gi, working, ds)
        return sp if working is WorkingModel.POISSON_STRUCTURAL else SpatialParams(tau2, sp.corr)
    if working is WorkingModel.INDEPENDENCE:
        return SpatialParams(tau2, CorrelationModel.independence())
    if working is WorkingModel.EXCHANGEABLE:
        return SpatialParams(tau2, CorrelationModel.exchangeable(estimate_exchangeable(first, gi)))

    kind = working.correlation_kind
    if working is WorkingModel.POISSON_STRUCTURAL:
        if rho_estimator is RhoEstimator.LSQ:
            i, j, _ = within_group_pairs(ds)
            u, m = first.residuals, first.fitted_means
            fit = estimate_rho_lsq(u[i] * u[j] / (m[i] * m[j]), ds.distances[i, j], kind, scale=tau2)
        else:
            fit = estimate_rho_direct(first, ds, rho_pairs)
        return SpatialParams(tau2, CorrelationModel(kind, fit.rho))

    if rho_estimator is RhoEstimator.DIRECT:
        rho = estimate_rho_direct(first, ds, rho_pairs).rho
    else:
        products, d = within_group_products(first, ds)
        rho = estimate_rho_lsq(products, d, kind).rho
    floor = RHO_MIN if kind is CorrelationKind.CRESSIE else 0.0
    if kind is not CorrelationKind.EXPMINUS1 and rho < floor:
        logger.warning("rho estimate %.4g below %g for %s; raised to it", rho, floor, kind.value)
        rho = floor
    return SpatialParams(tau2, CorrelationModel(kind, rho))


class TwoStepEstimator:
    """Runs the requested estimators on one dataset."""

    def __init__(self, ds: Dataset, options: PipelineOptions = PipelineOptions()):
        self.ds = ds
        self.options = options
        self.kernel = resolve_kernel(ds, options.kernel)
        self._first = {}
        self._tau2 = None

    def family_spec(self, kind) -> FamilySpec:
        kind = FamilyKind.parse(kind)
        if kind is FamilyKind.POISSON:
            return FamilySpec.poisson()
        if kind is FamilyKind.PROBIT:
            return FamilySpec.probit()
        return FamilySpec.negbin2(self.tau2(), self.options.nb2_exponent)

    def tau2(self):
        """Overdispersion from the Poisson first step, shared by both count families."""
        if self._tau2 is None:
            poisson = self.first_step(FamilyKind.POISSON)
            if not poisson.converged:
                raise EstimationError("Poisson first step did not converge; tau2 is unavailable")
            self._tau2 = estimate_tau2(poisson)
            logger.info("tau2 = %.6g", self._tau2)
        return self._tau2

    def first_step(self, kind) -> PqmleResult:
        kind = FamilyKind.parse(kind)
        if kind not in self._first:
            opts = self.options.solver
            if kind is FamilyKind.NEGBIN2:
                start = self.first_step(FamilyKind.POISSON).beta_check
                opts = SolverOptions(opts.tol, opts.max_iter, opts.max_halvings, tuple(start))
            self._first[kind] = fit_pqmle(self.ds, self.family_spec(kind), opts)
        return self._first[kind]

    def run(self, estimators=None) -> dict:
        if estimators is None:
            estimators = default_estimators(FamilyKind.POISSON)
        out = {}
        for name in estimators:
            name = EstimatorName.parse(name)
            out[name] = self.estimate(name)
        return out

    def estimate(self, name) -> Estimate:
        name = EstimatorName.parse(name)
        if name is EstimatorName.OLS:
            return self._ols()
        if name.is_gee:
            return self._gee(name)
        return self._pooled(name)

    def _ols(self):
        res = ols_loglinear(self.ds)
        return Estimate(name=EstimatorName.OLS, names=self.ds.names, beta=res.beta, se=res.se_robust,
                        avar=res.avar, converged=True, n_obs=res.n_used,
                        wald=(res.f_stat, res.f_df, res.f_pvalue),
                        details={"se_classical": res.se_classical.tolist(), "r2": res.r2,
                                 "n_dropped": res.n_dropped})

    def _pooled(self, name):
        first = self.first_step(name.family)
        p = self.ds.p
        avar = np.full((p, p), np.nan)
        wald = (float("nan"), 0, float("nan"))
        if first.converged and self.options.inference:
            avar = robust_avar_pqmle(self.ds, first.family, first, self.kernel)
            wald = slope_wald(self.ds, first.beta_check, avar)
        details = {"score_norm": first.score_norm, "separation": first.separation}
        if first.family.kind is FamilyKind.NEGBIN2:
            details["tau2"] = first.family.tau2
        return Estimate(name=name, names=self.ds.names, beta=first.beta_check,
                        se=np.sqrt(np.maximum(np.diag(avar), 0.0)) if first.converged else np.full(p, np.nan),
                        avar=avar, converged=first.converged, iterations=first.iterations, n_obs=self.ds.n,
                        loglik=first.loglik, wald=wald, details=details)

    def _gee(self, name):
        first = self.first_step(name.family)
        p = self.ds.p
        if not first.converged:
            logger.warning("%s skipped: first step did not converge", name.value)
            return Estimate(name=name, names=self.ds.names, beta=np.full(p, np.nan), se=np.full(p, np.nan),
                            avar=np.full((p, p), np.nan), converged=False, n_obs=self.ds.n)
        o = self.options
        tau2 = self.tau2() if first.family.is_count else 0.0
        sp = estimate_spatial_params(first, self.ds, o.working, o.rho_estimator, o.rho_pairs, tau2=tau2)
        logger.info("%s spatial parameters: %s", name.value, sp.to_dict())
        gee_opts = GeeOptions(tol=o.solver.tol, max_iter=o.solver.max_iter, max_halvings=o.solver.max_halvings,
                              mode=o.working.weight_mode, kernel=self.kernel)
        res = gee_fit(self.ds, self.ds.group_index, first.family, first, sp, gee_opts)
        wald = slope_wald(self.ds, res.beta_hat, res.avar) if res.converged else (float("nan"), 0, float("nan"))
        details = {"spatial": sp.to_dict(), "score_norm": res.score_norm, "objective": res.objective,
                   "n_repaired": res.weights.n_repaired, "n_clipped": res.weights.n_clipped}
        if res.converged:
            details["se_naive"] = np.sqrt(np.maximum(np.diag(res.naive_cov), 0.0)).tolist()
        return Estimate(name=name, names=self.ds.names, beta=res.beta_hat, se=res.se, avar=res.avar,
                        converged=res.converged, iterations=res.iterations, n_obs=self.ds.n,
                        wald=wald, details=details)
