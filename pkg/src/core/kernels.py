from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.core.errors import DataValidationError

# Default bandwidth = this multiple of the median nearest-neighbour group distance.
BANDWIDTH_MULTIPLIER = 1.5


class KernelKind(Enum):
    TRUNCATION = "truncation"
    BARTLETT = "bartlett"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown kernel '{value}' (valid: {valid})", column="kernel.kind") from e


@dataclass(frozen=True)
class KernelSpec:
    """
    Distance kernel for the spatial HAC meat.
    truncation: k(d) = 1 for d < h, else 0
    bartlett:   k(d) = 1 - d/h for d < h, else 0
    """

    kind: KernelKind = KernelKind.BARTLETT
    bandwidth: float = None  # None: chosen from the data by resolve_kernel

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind.parse(self.kind))
        if self.bandwidth is None:
            return
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0.0:
            raise DataValidationError(f"bandwidth must be > 0, got {self.bandwidth}", column="kernel.bandwidth")

    def weights(self, d):
        if self.bandwidth is None:
            raise DataValidationError("kernel bandwidth not resolved", column="kernel.bandwidth")
        d = np.asarray(d, dtype=float)
        inside = d < self.bandwidth
        if self.kind is KernelKind.TRUNCATION:
            return inside.astype(float)
        return np.where(inside, 1.0 - d / self.bandwidth, 0.0)

    def to_dict(self):
        return {"kind": self.kind.value, "bandwidth": None if self.bandwidth is None else float(self.bandwidth)}


def default_bandwidth(group_distances):
    """1.5 x the median over groups of the distance to the nearest other group."""
    d = np.array(group_distances, dtype=float, copy=True)
    if d.shape[0] < 2:
        return 1.0
    np.fill_diagonal(d, np.inf)
    nearest = d.min(axis=1)
    bandwidth = BANDWIDTH_MULTIPLIER * float(np.median(nearest))
    return bandwidth if bandwidth > 0.0 else 1.0
