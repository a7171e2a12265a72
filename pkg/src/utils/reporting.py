"""
Report builders: the JSON fit report, the coefficient table in the layout
of a published regression table, and the Monte Carlo summary CSV.
"""

import json
import math

import numpy as np
import pandas as pd
from scipy import stats

from src.entities.spatial_dataset import Dataset, describe, grouping_table
from src.entities.two_step_estimator import Estimate
from src.utils.log import get_logger

logger = get_logger("Reporting")

SCHEMA_VERSION = "1.0"
MC_FLOAT_FORMAT = "%.6f"


def stars(p):
    if not np.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def coefficient_frame(est: Estimate) -> pd.DataFrame:
    """estimate, robust s.e., z and two-sided normal p-value per coefficient."""
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(est.se > 0.0, est.beta / est.se, np.nan)
    p = 2.0 * stats.norm.sf(np.abs(z))
    return pd.DataFrame({"name": list(est.names), "estimate": est.beta, "se": est.se, "z": z, "p": p})


def _clean(value):
    """JSON-safe copy: numpy scalars and arrays unwrapped, NaN/inf as null."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    return value


def _wald_dict(wald):
    stat, df, p = wald
    if isinstance(df, tuple):
        return {"test": "F", "statistic": stat, "df": list(df), "p": p}
    return {"test": "chi2", "statistic": stat, "df": df, "p": p}


def fit_report(ds: Dataset, estimates: dict, config: dict, kernel=None) -> dict:
    """
    Versioned report of one `fit` run. Fields are only ever added within
    a major schema version.
    """
    out = {
        "schema_version": SCHEMA_VERSION,
        "dataset": {"n": ds.n, "p": ds.p, "n_groups": ds.n_groups, "response": ds.response_name,
                    "covariates": list(ds.names), "metric": ds.metric.value},
        "kernel": kernel.to_dict() if kernel is not None else None,
        "estimators": {},
        "diagnostics": {
            "describe": describe(ds).to_dict(orient="records"),
            "grouping": grouping_table(ds).to_dict(orient="records"),
        },
        "config": config,
    }
    for name, est in estimates.items():
        entry = {
            "label": name.label,
            "converged": est.converged,
            "iterations": est.iterations,
            "n_obs": est.n_obs,
            "loglik": est.loglik,
            "coefficients": coefficient_frame(est).to_dict(orient="records"),
            "wald": _wald_dict(est.wald),
        }
        details = dict(est.details)
        if "spatial" in details:
            entry["spatial_params"] = details.pop("spatial")
        entry["diagnostics"] = details
        out["estimators"][name.value] = entry
    return _clean(out)


def write_json(report: dict, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=False, allow_nan=False)
        fh.write("\n")
    logger.info("report written to %s", path)


def coefficient_table(estimates: dict) -> pd.DataFrame:
    """
    One column per estimator. Each coefficient takes two rows: the
    estimate with significance stars, then the robust s.e. in parentheses.
    Observations and the joint slope test close the table.
    """
    columns = {}
    index = None
    for name, est in estimates.items():
        frame = coefficient_frame(est)
        cells, labels = [], []
        for row in frame.itertuples():
            labels += [row.name, ""]
            if np.isfinite(row.estimate):
                cells.append(f"{row.estimate:.3f}{stars(row.p)}")
                cells.append(f"({row.se:.3f})" if np.isfinite(row.se) else "")
            else:
                cells += ["", ""]
        stat, df, p = est.wald
        labels += ["Observations", "Wald Chi2", "F"]
        test = f"{stat:.2f}{stars(p)}" if np.isfinite(stat) else ""
        if isinstance(df, tuple):
            cells += [str(est.n_obs), "", f"{test} F({df[0]}, {df[1]})" if test else ""]
        else:
            cells += [str(est.n_obs), f"{test} Chi2({df})" if test else "", ""]
        columns[name.label] = cells
        index = labels
    return pd.DataFrame(columns, index=pd.Index(index, name="variable"))


def write_coefficient_csv(estimates: dict, path):
    coefficient_table(estimates).to_csv(path, lineterminator="\n")
    logger.info("coefficient table written to %s", path)


def mc_frame(summary) -> pd.DataFrame:
    frame = summary.to_frame()
    frame.insert(0, "case", summary.dgp.kind.value)
    frame.insert(1, "rho", summary.dgp.rho)
    return frame


def write_mc_csv(summary, path):
    """Fixed float formatting so that reruns with the same seed are byte-identical."""
    mc_frame(summary).to_csv(path, index=False, float_format=MC_FLOAT_FORMAT, lineterminator="\n")
    logger.info("Monte Carlo table written to %s", path)
