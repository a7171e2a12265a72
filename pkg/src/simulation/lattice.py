from dataclasses import dataclass
from functools import cached_property

import numpy as np

from src.core.errors import DataValidationError
from src.entities.spatial_dataset import Dataset, DistanceMetric, block_grouping, distance_matrix


@dataclass(frozen=True)
class LatticeSpec:
    side: int = 20
    spacing: float = 1.0

    def __post_init__(self):
        if self.side < 2 or self.side % 2:
            raise DataValidationError(f"lattice side must be an even integer >= 2, got {self.side}",
                                      column="side")
        if not self.spacing > 0:
            raise DataValidationError("lattice spacing must be > 0", column="spacing")

    @property
    def n(self):
        return self.side * self.side


@dataclass(frozen=True)
class Lattice:
    """Row-major points (r, s), r, s = 1..side, cut into 2x2 tiles."""

    spec: LatticeSpec
    coords: np.ndarray
    group_id: np.ndarray

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def n_groups(self):
        return int(self.group_id.max()) + 1

    @cached_property
    def distances(self):
        return distance_matrix(self.coords, self.coords, DistanceMetric.EUCLIDEAN)

    @cached_property
    def groups(self):
        return [np.flatnonzero(self.group_id == g) for g in range(self.n_groups)]

    def dataset(self, y, X, names=(), meta=None) -> Dataset:
        return Dataset(y=y, X=X, coords=self.coords, group_id=self.group_id,
                       metric=DistanceMetric.EUCLIDEAN, names=names, meta=dict(meta or {}))


def make_lattice(spec: LatticeSpec) -> Lattice:
    r, s = np.divmod(np.arange(spec.n), spec.side)
    coords = spec.spacing * np.column_stack([r + 1.0, s + 1.0])
    return Lattice(spec=spec, coords=coords, group_id=block_grouping(spec.side, 4))
