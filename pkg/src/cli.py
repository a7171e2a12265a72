"""
Command-line front end.

    python -m src.cli fit --input data.csv --schema schema.json --family poisson
    python -m src.cli mc --case count1 --rho 0 --reps 200 --seed 42 --output table1.csv
    python -m src.cli simulate --case count1 --seed 7 --output draw.csv

Exit codes: 0 success, 1 input/validation error, 2 estimation non-convergence.
Log lines go to stderr; stdout carries one summary line.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from src.core.errors import DataValidationError, SpatialGEEError
from src.core.families import FamilyKind
from src.entities.two_step_estimator import EstimatorName, TwoStepEstimator, default_estimators
from src.simulation.dgp import generator_for
from src.simulation.monte_carlo import McConfig, run_monte_carlo
from src.simulation.random_streams import replication_rng
from src.utils.config import RunConfig, resolve_threads
from src.utils.data_loader import load_csv, load_schema, save_csv
from src.utils.log import configure_logging, get_logger
from src.utils.reporting import fit_report, write_coefficient_csv, write_json, write_mc_csv

logger = get_logger("CLI")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NONCONVERGED = 2


def _estimator_list(value):
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _add_common(p):
    p.add_argument("--config", help="JSON config file with flat dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--output", dest="io_output", help="output file")
    p.add_argument("--estimators", type=_estimator_list, help="comma-separated estimator names")
    p.add_argument("--working", help="independence, exchangeable, cressie, invdist, expminus1, "
                                     "poisson-structural")
    p.add_argument("--rho-estimator", dest="rho_estimator", help="direct, lsq, prentice")
    p.add_argument("--rho-pairs", dest="rho_pairs", help="within or all")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--nb2-exponent", dest="nb2_exponent", type=int, help="1 or 2")
    g = p.add_mutually_exclusive_group()
    g.add_argument("-v", "--verbose", action="store_true")
    g.add_argument("-q", "--quiet", action="store_true")


def _add_design(p):
    p.add_argument("--case", help="count1, count2, count3, probit1, probit2, ragged")
    p.add_argument("--rho", type=float)
    p.add_argument("--side", type=int, help="lattice side; N = side^2")
    p.add_argument("--threshold", type=float, help="probit latent threshold")
    p.add_argument("--case2-double-rho", dest="double_rho", action="store_true", default=None,
                   help="apply rho twice in the count Case 2 SAR system")


def build_parser():
    parser = argparse.ArgumentParser(prog="spatial-gee",
                                     description="Two-step spatial GEE for count and binary responses")
    sub = parser.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate on CSV data")
    _add_common(fit)
    fit.add_argument("--input", dest="io_input", help="input CSV")
    fit.add_argument("--schema", dest="io_schema", help="JSON file naming the column roles")
    fit.add_argument("--table", dest="io_table", help="coefficient table CSV")
    fit.add_argument("--family", help="poisson, nb2, probit")
    fit.add_argument("--kernel", dest="kernel_kind", help="bartlett or truncation")
    fit.add_argument("--bandwidth", dest="kernel_bandwidth", type=float)
    fit.add_argument("--grouping", help="schema, blocks, singletons")

    mc = sub.add_parser("mc", help="run one Monte Carlo design")
    _add_common(mc)
    _add_design(mc)
    mc.add_argument("--reps", type=int)
    mc.add_argument("--threads", type=int)

    sim = sub.add_parser("simulate", help="write one synthetic dataset")
    _add_common(sim)
    _add_design(sim)
    return parser


def resolve_config(args) -> RunConfig:
    base = RunConfig.from_file(args.config) if args.config else RunConfig()
    flags = {k: v for k, v in vars(args).items() if k not in ("config", "verbose", "quiet")}
    return base.merged(flags)


def cmd_fit(cfg: RunConfig) -> int:
    if not cfg.io_input:
        raise DataValidationError("fit needs an input CSV (--input)", column="io.input")
    if not cfg.io_schema:
        raise DataValidationError("fit needs a schema file (--schema)", column="io.schema")
    schema = load_schema(cfg.io_schema)
    if cfg.grouping != "schema":
        schema = replace(schema, group=None, grouping=cfg.grouping)
    ds = load_csv(cfg.io_input, schema)

    family = FamilyKind.parse(cfg.family)
    estimators = [EstimatorName.parse(e) for e in cfg.estimators] or list(default_estimators(family))
    for e in estimators:
        if e.family is not None and (e.family is FamilyKind.PROBIT) != (family is FamilyKind.PROBIT):
            raise DataValidationError(f"estimator {e.value} does not fit family {family.value}",
                                      column="estimators")
    ds.check_response("binary" if family is FamilyKind.PROBIT else "count")

    fitter = TwoStepEstimator(ds, cfg.pipeline_options())
    estimates = fitter.run(estimators)
    report = fit_report(ds, estimates, cfg.to_flat_dict(), fitter.kernel)

    write_json(report, cfg.io_output or "fit_report.json")
    if cfg.io_table:
        write_coefficient_csv(estimates, cfg.io_table)

    failed = [e.value for e, est in estimates.items() if not est.converged]
    if failed:
        logger.warning("not converged: %s", ", ".join(failed))
        print(f"fit: {len(estimates) - len(failed)}/{len(estimates)} estimators converged")
        return EXIT_NONCONVERGED
    print(f"fit: {len(estimates)} estimators converged on {ds.n} observations")
    return EXIT_OK


def cmd_mc(cfg: RunConfig) -> int:
    dgp = cfg.dgp_spec()
    mc_cfg = McConfig(reps=cfg.reps, seed=cfg.seed, estimators=cfg.estimators, working=cfg.working,
                      options=cfg.pipeline_options(), threads=resolve_threads(cfg.threads))
    summary = run_monte_carlo(mc_cfg, dgp)
    out = cfg.io_output or f"mc_{dgp.kind.value}_rho{dgp.rho:g}.csv"
    write_mc_csv(summary, out)
    flagged = [e.value for e in summary.estimators if summary.flagged(e)]
    note = f", non-convergence above 5%: {', '.join(flagged)}" if flagged else ""
    print(f"mc: {dgp.kind.value} rho={dgp.rho:g}, {cfg.reps} replications -> {out}{note}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    if not cfg.io_output:
        raise DataValidationError("simulate needs an output CSV (--output)", column="io.output")
    generator = generator_for(cfg.dgp_spec())
    ds = generator.draw(replication_rng(cfg.seed, 0))
    schema = save_csv(ds, cfg.io_output)
    meta = dict(generator.meta(), seed=cfg.seed, schema=schema.to_dict())
    sidecar = os.path.splitext(cfg.io_output)[0] + ".meta.json"
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"simulate: {ds.n} rows, {ds.n_groups} groups -> {cfg.io_output}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "mc": cmd_mc, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    configure_logging(level)
    try:
        cfg = resolve_config(args)
        return COMMANDS[cfg.command](cfg)
    except SpatialGEEError as e:
        logger.error("%s", e)
        return EXIT_ERROR
    except OSError as e:
        logger.error("%s", e)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
