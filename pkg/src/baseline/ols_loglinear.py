"""
Log-linear OLS baseline: ln(y) on X for the rows with y > 0.

Kept for comparison with the count-data estimators; rows with a zero
response are dropped because ln(0) is undefined. Standard errors come
in two flavours, classical and White (HC1); the F test is the classical one.
"""

from dataclasses import dataclass

import numpy as np
import statsmodels.api as sm

from src.core.errors import EstimationError
from src.core.pooled_qmle import check_full_rank, intercept_column
from src.entities.spatial_dataset import Dataset
from src.utils.log import get_logger

logger = get_logger("OLS")


@dataclass(frozen=True)
class OlsResult:
    beta: np.ndarray
    se_classical: np.ndarray
    se_robust: np.ndarray
    residuals: np.ndarray
    n_used: int
    n_dropped: int
    sigma2: float
    f_stat: float
    f_df: tuple
    f_pvalue: float
    r2: float
    avar: np.ndarray = None


def ols_loglinear(ds: Dataset) -> OlsResult:
    keep = ds.y > 0
    dropped = int(ds.n - keep.sum())
    if dropped:
        logger.info("dropped %d rows with %s <= 0 before taking logs", dropped, ds.response_name)
    X = ds.X[keep]
    z = np.log(ds.y[keep])
    n, p = X.shape
    if n < p:
        raise EstimationError(f"only {n} rows with positive response for {p} covariates")
    check_full_rank(X, ds.names)

    res = sm.OLS(z, X).fit(method="qr")
    robust = res.get_robustcov_results(cov_type="HC1")
    cov_robust = np.asarray(robust.cov_params())
    cov_robust = 0.5 * (cov_robust + cov_robust.T)

    k = p - (1 if intercept_column(X) is not None else 0)
    dof = n - p
    f_stat, f_p = float("nan"), float("nan")
    if k and dof > 0:
        f_stat, f_p = float(res.fvalue), float(res.f_pvalue)

    return OlsResult(
        beta=np.asarray(res.params),
        se_classical=np.asarray(res.bse),
        se_robust=np.sqrt(np.maximum(np.diag(cov_robust), 0.0)),
        residuals=np.asarray(res.resid),
        n_used=n,
        n_dropped=dropped,
        sigma2=float(res.scale),
        f_stat=f_stat,
        f_df=(k, dof),
        f_pvalue=f_p,
        r2=float(res.rsquared),
        avar=cov_robust,
    )
