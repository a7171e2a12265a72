"""
Replicated experiments: draw, fit every requested estimator, summarise.

Replications run on a thread pool. Each one owns its random stream and
its dataset, and results are reduced in replication order, so the summary
is the same for any number of workers.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.core.errors import DataValidationError, SpatialGEEError
from src.core.families import FamilyKind
from src.core.working_correlation import WorkingModel
from src.entities.two_step_estimator import (COUNT_ESTIMATORS, PROBIT_ESTIMATORS, EstimatorName, PipelineOptions,
                                             TwoStepEstimator)
from src.simulation.dgp import DgpSpec, generator_for
from src.simulation.random_streams import check_seed, replication_rng
from src.utils.log import get_logger

logger = get_logger("MonteCarlo")

NONCONVERGENCE_FLAG = 0.05

DEFAULT_COUNT = tuple(e for e in COUNT_ESTIMATORS if e is not EstimatorName.OLS)


@dataclass(frozen=True)
class McConfig:
    reps: int = 1000
    seed: int = 0
    estimators: tuple = ()
    working: WorkingModel = WorkingModel.EXCHANGEABLE
    options: PipelineOptions = None
    threads: int = 1

    def __post_init__(self):
        if self.reps < 1:
            raise DataValidationError(f"reps must be >= 1, got {self.reps}", column="reps")
        if self.threads < 1:
            raise DataValidationError(f"threads must be >= 1, got {self.threads}", column="threads")
        check_seed(self.seed)
        object.__setattr__(self, "working", WorkingModel.parse(self.working))
        object.__setattr__(self, "estimators", tuple(EstimatorName.parse(e) for e in self.estimators))
        if EstimatorName.OLS in self.estimators:
            raise DataValidationError("OLS is not part of the Monte Carlo comparison", column="estimators")

    def estimators_for(self, dgp: DgpSpec):
        if self.estimators:
            chosen = self.estimators
        else:
            chosen = DEFAULT_COUNT if dgp.kind.is_count else PROBIT_ESTIMATORS
        for e in chosen:
            if (e.family is FamilyKind.PROBIT) == dgp.kind.is_count:
                raise DataValidationError(f"estimator {e.value} does not fit a {dgp.kind.value} design",
                                          column="estimators")
        return chosen

    def pipeline_options(self):
        base = self.options or PipelineOptions()
        return PipelineOptions(working=self.working, rho_estimator=base.rho_estimator, rho_pairs=base.rho_pairs,
                               kernel=base.kernel, solver=base.solver, nb2_exponent=base.nb2_exponent,
                               inference=False)

    def to_dict(self):
        return {"reps": self.reps, "seed": self.seed, "estimators": [e.value for e in self.estimators],
                "working": self.working.value}


@dataclass(frozen=True)
class Replication:
    rep: int
    betas: dict
    converged: dict
    tau2: float = float("nan")


@dataclass(frozen=True)
class McSummary:
    dgp: DgpSpec
    config: McConfig
    names: tuple
    beta0: np.ndarray
    estimators: tuple
    mean: dict
    sd: dict
    mc_se_mean: dict
    mc_se_sd: dict
    n_converged: dict
    tau2_mean: float = float("nan")
    tau2_sd: float = float("nan")
    elapsed: float = 0.0
    replications: tuple = field(default=(), repr=False)

    @property
    def single_rep(self):
        return self.config.reps == 1

    def nonconvergence(self, estimator):
        return 1.0 - self.n_converged[estimator] / self.config.reps

    def flagged(self, estimator):
        return self.nonconvergence(estimator) > NONCONVERGENCE_FLAG

    def to_frame(self) -> pd.DataFrame:
        """One row per coefficient and estimator, in the order of the published tables."""
        rows = []
        for j, name in enumerate(self.names):
            for e in self.estimators:
                rows.append({
                    "coefficient": name,
                    "true": float(self.beta0[j]),
                    "estimator": e.label,
                    "mean": self.mean[e][j],
                    "sd": self.sd[e][j],
                    "mc_se_mean": self.mc_se_mean[e][j],
                    "mc_se_sd": self.mc_se_sd[e][j],
                    "converged": self.n_converged[e],
                    "reps": self.config.reps,
                    "single_rep": self.single_rep,
                    "flagged": self.flagged(e),
                })
        return pd.DataFrame(rows)


def _run_one(rep, seed, generator, estimators, options):
    ds = generator.draw(replication_rng(seed, rep))
    fitter = TwoStepEstimator(ds, options)
    betas, converged = {}, {}
    for e in estimators:
        try:
            est = fitter.estimate(e)
            betas[e], converged[e] = est.beta, bool(est.converged and np.all(np.isfinite(est.beta)))
        except SpatialGEEError as err:
            logger.debug("rep %d %s failed: %s", rep, e.value, err)
            betas[e], converged[e] = np.full(ds.p, np.nan), False
    tau2 = float("nan")
    if generator.spec.kind.is_count:
        try:
            tau2 = fitter.tau2()
        except SpatialGEEError:
            pass
    return Replication(rep=rep, betas=betas, converged=converged, tau2=tau2)


def _moments(values):
    """mean, sd (ddof=1, 0 for one value), and their Monte Carlo standard errors."""
    r = values.shape[0]
    if r == 0:
        nan = np.full(values.shape[1], np.nan)
        return nan, nan, nan, nan
    mean = values.mean(axis=0)
    if r == 1:
        zero = np.zeros(values.shape[1])
        return mean, zero, zero, zero
    sd = values.std(axis=0, ddof=1)
    return mean, sd, sd / math.sqrt(r), sd / math.sqrt(2.0 * (r - 1))


def run_monte_carlo(cfg: McConfig, dgp: DgpSpec) -> McSummary:
    estimators = cfg.estimators_for(dgp)
    generator = generator_for(dgp)
    options = cfg.pipeline_options()
    start = time.time()
    logger.info("%s rho=%g: %d replications on %d threads", dgp.kind.value, dgp.rho, cfg.reps, cfg.threads)

    step = max(cfg.reps // 10, 1)
    results = [None] * cfg.reps

    def task(rep):
        out = _run_one(rep, cfg.seed, generator, estimators, options)
        if (rep + 1) % step == 0:
            logger.info("replication %d/%d done", rep + 1, cfg.reps)
        return out

    if cfg.threads == 1:
        for rep in range(cfg.reps):
            results[rep] = task(rep)
    else:
        with ThreadPoolExecutor(max_workers=cfg.threads) as executor:
            for rep, out in zip(range(cfg.reps), executor.map(task, range(cfg.reps))):
                results[rep] = out

    p = len(generator.draw_names())
    mean, sd, se_mean, se_sd, n_conv = {}, {}, {}, {}, {}
    for e in estimators:
        ok = [r.betas[e] for r in results if r.converged[e]]
        values = np.vstack(ok) if ok else np.empty((0, p))
        mean[e], sd[e], se_mean[e], se_sd[e] = _moments(values)
        n_conv[e] = len(ok)
        if 1.0 - n_conv[e] / cfg.reps > NONCONVERGENCE_FLAG:
            logger.warning("%s: %d of %d replications did not converge", e.value, cfg.reps - n_conv[e], cfg.reps)

    tau2 = np.array([r.tau2 for r in results if np.isfinite(r.tau2)])
    tau2_mean = float(tau2.mean()) if tau2.size else float("nan")
    tau2_sd = float(tau2.std(ddof=1)) if tau2.size > 1 else float("nan")

    elapsed = time.time() - start
    logger.info("finished in %.1fs", elapsed)
    return McSummary(dgp=dgp, config=cfg, names=generator.draw_names(), beta0=dgp.beta0,
                     estimators=tuple(estimators), mean=mean, sd=sd, mc_se_mean=se_mean, mc_se_sd=se_sd,
                     n_converged=n_conv, tau2_mean=tau2_mean, tau2_sd=tau2_sd, elapsed=elapsed,
                     replications=tuple(results))
