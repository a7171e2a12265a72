"""
Run configuration shared by the command-line front end and the scripts.

On disk a configuration is one JSON object with flat dotted keys:

    {"command": "fit", "family": "poisson", "kernel.kind": "bartlett",
     "kernel.bandwidth": 1.5, "io.input": "data/fdi.csv", ...}

Precedence is defaults < file < explicit overrides (command-line flags).
"""

import json
import os
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from src.core.errors import DataValidationError
from src.core.families import FamilyKind
from src.core.kernels import KernelKind, KernelSpec
from src.core.pooled_qmle import SolverOptions
from src.core.working_correlation import RhoEstimator, WorkingModel
from src.entities.two_step_estimator import EstimatorName, PipelineOptions
from src.simulation.dgp import DgpKind, DgpSpec
from src.simulation.random_streams import check_seed

THREADS_ENV = "SPATIAL_GEE_THREADS"

COMMANDS = ("fit", "mc", "simulate")
GROUPINGS = ("schema", "blocks", "singletons")

# attribute name -> dotted file key, for the nested sections
_DOTTED = {
    "kernel_kind": "kernel.kind",
    "kernel_bandwidth": "kernel.bandwidth",
    "io_input": "io.input",
    "io_schema": "io.schema",
    "io_output": "io.output",
    "io_table": "io.table",
}
_ATTR = {v: k for k, v in _DOTTED.items()}


@dataclass(frozen=True)
class RunConfig:
    command: str = "fit"
    family: str = "poisson"
    working: str = "exchangeable"
    rho_estimator: str = None
    rho_pairs: str = "within"
    kernel_kind: str = "bartlett"
    kernel_bandwidth: float = None
    grouping: str = "schema"
    io_input: str = None
    io_schema: str = None
    io_output: str = None
    io_table: str = None
    seed: int = 0
    reps: int = 1000
    case: str = "count1"
    rho: float = 0.0
    side: int = 20
    threshold: float = 1.5
    double_rho: bool = False
    estimators: tuple = ()
    tol: float = 1e-8
    max_iter: int = 100
    nb2_exponent: int = 2
    threads: int = None

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(self.estimators or ()))
        if self.command not in COMMANDS:
            raise DataValidationError(f"unknown command '{self.command}' (valid: {', '.join(COMMANDS)})",
                                      column="command")
        if self.grouping not in GROUPINGS:
            raise DataValidationError(f"unknown grouping '{self.grouping}' (valid: {', '.join(GROUPINGS)})",
                                      column="grouping")
        # parse() raises with the offending key; the stored values stay plain strings
        FamilyKind.parse(self.family)
        WorkingModel.parse(self.working)
        if self.rho_estimator is not None:
            RhoEstimator.parse(self.rho_estimator)
        KernelKind.parse(self.kernel_kind)
        DgpKind.parse(self.case)
        for e in self.estimators:
            EstimatorName.parse(e)
        if self.rho_pairs not in ("within", "all"):
            raise DataValidationError(f"unknown pair set '{self.rho_pairs}' (valid: within, all)",
                                      column="rho_pairs")
        if self.kernel_bandwidth is not None and not (np.isfinite(self.kernel_bandwidth)
                                                      and self.kernel_bandwidth > 0.0):
            raise DataValidationError(f"must be > 0, got {self.kernel_bandwidth}", column="kernel.bandwidth")
        check_seed(self.seed)
        _positive(self, "reps", "max_iter", "side")
        if not self.tol > 0.0:
            raise DataValidationError(f"must be > 0, got {self.tol}", column="tol")
        if self.nb2_exponent not in (1, 2):
            raise DataValidationError("must be 1 or 2", column="nb2_exponent")
        if self.threads is not None and self.threads < 1:
            raise DataValidationError(f"must be >= 1, got {self.threads}", column="threads")

    # -- file representation ---------------------------------------------

    def to_flat_dict(self):
        out = {}
        for name, value in asdict(self).items():
            out[_DOTTED.get(name, name)] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_flat_dict(cls, data):
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            attr = _ATTR.get(key, key)
            if attr not in known:
                raise DataValidationError("unknown configuration key", column=key)
            kwargs[attr] = value
        return cls(**kwargs)

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_flat_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_file(cls, path):
        if not os.path.exists(path):
            raise DataValidationError(f"config file not found: {path}", column="config")
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise DataValidationError(f"config file {path} is not valid JSON: {e}", column="config") from e
        if not isinstance(data, dict):
            raise DataValidationError("config file must hold a JSON object", column="config")
        return cls.from_flat_dict(data)

    def merged(self, overrides):
        """Copy with every non-None override applied; keys are attribute or dotted names."""
        changes = {_ATTR.get(k, k): v for k, v in overrides.items() if v is not None}
        return replace(self, **changes)

    # -- views used by the commands --------------------------------------

    def kernel(self):
        bandwidth = None if self.kernel_bandwidth is None else float(self.kernel_bandwidth)
        return KernelSpec(KernelKind.parse(self.kernel_kind), bandwidth)

    def solver(self):
        return SolverOptions(tol=self.tol, max_iter=self.max_iter)

    def pipeline_options(self):
        return PipelineOptions(working=self.working, rho_estimator=self.rho_estimator, rho_pairs=self.rho_pairs,
                               kernel=self.kernel(), solver=self.solver(), nb2_exponent=self.nb2_exponent)

    def dgp_spec(self):
        return DgpSpec(kind=self.case, rho=float(self.rho), side=self.side, threshold=self.threshold,
                       double_rho=self.double_rho)


def _positive(cfg, *names):
    for name in names:
        value = getattr(cfg, name)
        if int(value) != value or value < 1:
            raise DataValidationError(f"must be a positive integer, got {value}", column=name)


def resolve_threads(requested=None):
    """Worker count: the request, capped by SPATIAL_GEE_THREADS, else the CPU count."""
    cap = os.environ.get(THREADS_ENV)
    if cap is not None:
        try:
            cap = int(cap)
        except ValueError as e:
            raise DataValidationError(f"must be an integer, got '{cap}'", column=THREADS_ENV) from e
        if cap < 1:
            raise DataValidationError(f"must be >= 1, got {cap}", column=THREADS_ENV)
    default = cap if cap is not None else (os.cpu_count() or 1)
    threads = requested if requested is not None else default
    return min(threads, cap) if cap is not None else threads
