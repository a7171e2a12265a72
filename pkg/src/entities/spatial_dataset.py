"""
Observations, locations and group structure.

A Dataset holds the response y, the covariates X, planar or geographic
coordinates and a contiguous 0-based group label per row. Everything is
frozen after construction so one Dataset can be shared by concurrent fits.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist

from src.core.errors import DataValidationError

EARTH_RADIUS_KM = 6371.0


class DistanceMetric(Enum):
    EUCLIDEAN = "euclidean"
    HAVERSINE_KM = "haversine"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown metric '{value}' (valid: {valid})", column="metric") from e


def _frozen(array, dtype=float):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class GroupIndex:
    """Row indices per group, in Dataset row order."""

    groups: tuple
    sizes: np.ndarray

    @classmethod
    def from_labels(cls, group_id):
        group_id = np.asarray(group_id, dtype=int)
        n_groups = int(group_id.max()) + 1 if group_id.size else 0
        order = np.argsort(group_id, kind="stable")
        bounds = np.searchsorted(group_id[order], np.arange(n_groups + 1))
        groups = tuple(_frozen(order[bounds[g]:bounds[g + 1]], dtype=int) for g in range(n_groups))
        return cls(groups=groups, sizes=_frozen([len(g) for g in groups], dtype=int))

    @property
    def n_groups(self):
        return len(self.groups)

    @property
    def max_size(self):
        return int(self.sizes.max())

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)


@dataclass(frozen=True)
class Dataset:
    y: np.ndarray
    X: np.ndarray
    coords: np.ndarray
    group_id: np.ndarray
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN
    names: tuple = ()
    response_name: str = "y"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        coords = np.asarray(self.coords, dtype=float)
        group_id = np.asarray(self.group_id)

        n = y.shape[0]
        if y.ndim != 1 or n < 1:
            raise DataValidationError("response must be a non-empty vector", column=self.response_name)
        if X.ndim != 2 or X.shape[0] != n or X.shape[1] < 1:
            raise DataValidationError(f"covariate matrix must be {n}xp with p >= 1, got {X.shape}", column="X")
        if coords.shape != (n, 2):
            raise DataValidationError(f"coordinates must be {n}x2, got {coords.shape}", column="coords")
        if group_id.shape != (n,):
            raise DataValidationError(f"group labels must have length {n}", column="group_id")
        if not np.all(np.isfinite(y)):
            raise DataValidationError("non-finite response value", column=self.response_name)
        names = tuple(self.names) if self.names else tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataValidationError(f"{len(names)} names for {X.shape[1]} covariates", column="names")
        for j, name in enumerate(names):
            if not np.all(np.isfinite(X[:, j])):
                raise DataValidationError("non-finite covariate value", column=name)
        if not np.all(np.isfinite(coords)):
            raise DataValidationError("non-finite coordinate", column="coords")
        if not np.all(np.equal(np.mod(group_id, 1), 0)):
            raise DataValidationError("group labels must be integers", column="group_id")
        group_id = group_id.astype(int)
        present = np.unique(group_id)
        if present[0] != 0 or present[-1] != len(present) - 1:
            raise DataValidationError(
                "group labels must form the contiguous set {0,...,G-1} with every group non-empty",
                column="group_id")

        metric = DistanceMetric.parse(self.metric)
        if metric is DistanceMetric.HAVERSINE_KM:
            if np.any(np.abs(coords[:, 0]) > 90.0):
                raise DataValidationError("latitude outside [-90, 90]", column="coords")
            if np.any(np.abs(coords[:, 1]) > 180.0):
                raise DataValidationError("longitude outside [-180, 180]", column="coords")

        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "coords", _frozen(coords))
        object.__setattr__(self, "group_id", _frozen(group_id, dtype=int))
        object.__setattr__(self, "metric", metric)
        object.__setattr__(self, "names", names)

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @cached_property
    def group_index(self) -> GroupIndex:
        return GroupIndex.from_labels(self.group_id)

    @property
    def n_groups(self):
        return self.group_index.n_groups

    @cached_property
    def distances(self) -> np.ndarray:
        """Full n x n distance matrix under the dataset metric."""
        return _frozen(distance_matrix(self.coords, self.coords, self.metric))

    def check_response(self, response_kind):
        """
        response_kind is 'binary' (every y in {0,1}) or 'count'
        (every y a non-negative integer).
        """
        y = self.y
        if response_kind == "binary":
            if not np.all((y == 0.0) | (y == 1.0)):
                raise DataValidationError("binary response must be 0 or 1", column=self.response_name)
        elif response_kind == "count":
            if np.any(y < 0) or not np.all(np.floor(y) == y):
                raise DataValidationError("count response must be a non-negative integer",
                                          column=self.response_name)
        else:
            raise ValueError(f"unknown response kind '{response_kind}'")

    def with_response(self, y):
        """Same locations, covariates and groups with a new response vector."""
        return Dataset(y=y, X=self.X, coords=self.coords, group_id=self.group_id, metric=self.metric,
                       names=self.names, response_name=self.response_name, meta=dict(self.meta))


def _haversine(a, b):
    lat1, lon1 = np.radians(a[:, 0])[:, None], np.radians(a[:, 1])[:, None]
    lat2, lon2 = np.radians(b[:, 0])[None, :], np.radians(b[:, 1])[None, :]
    h = (np.sin((lat2 - lat1) / 2.0) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def distance_matrix(a, b, metric=DistanceMetric.EUCLIDEAN):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if DistanceMetric.parse(metric) is DistanceMetric.HAVERSINE_KM:
        return _haversine(a, b)
    return cdist(a, b, metric="euclidean")


def pairwise_distance(ds: Dataset, i: int, j: int) -> float:
    if not (0 <= i < ds.n and 0 <= j < ds.n):
        raise IndexError(f"observation index out of range: ({i}, {j}) with n={ds.n}")
    if i == j:
        return 0.0
    # Order the pair so d(i, j) and d(j, i) run the identical arithmetic.
    lo, hi = min(i, j), max(i, j)
    return float(distance_matrix(ds.coords[lo], ds.coords[hi], ds.metric)[0, 0])


def block_grouping(lattice_side: int, block: int = 4) -> np.ndarray:
    """
    Group labels for a row-major side x side lattice cut into square tiles
    of `block` points (block=4 gives the 2x2 tiles).
    """
    tile = math.isqrt(block)
    if tile * tile != block or block < 1:
        raise DataValidationError(f"block size {block} is not a square tile", column="block")
    if lattice_side < 1 or lattice_side % tile != 0:
        raise DataValidationError(
            f"lattice side {lattice_side} cannot be tiled by {tile}x{tile} blocks", column="lattice_side")
    r, s = np.divmod(np.arange(lattice_side * lattice_side), lattice_side)
    tiles_per_row = lattice_side // tile
    return (r // tile) * tiles_per_row + (s // tile)


def group_distance(ds: Dataset, g: int, h: int) -> float:
    """Smallest distance between a member of group g and a member of group h."""
    if g == h:
        raise ValueError(f"group distance is undefined for a group with itself (g={g})")
    gi = ds.group_index
    rows, cols = gi.groups[g], gi.groups[h]
    return float(distance_matrix(ds.coords[rows], ds.coords[cols], ds.metric).min())


def group_distance_matrix(ds: Dataset, gi: GroupIndex = None) -> np.ndarray:
    """G x G matrix of group_distance values for `gi` (default: the dataset's own groups); the diagonal is 0."""
    gi = ds.group_index if gi is None else gi
    order = np.concatenate(gi.groups)
    starts = np.concatenate(([0], np.cumsum(gi.sizes)[:-1]))
    d = ds.distances[np.ix_(order, order)]
    out = np.minimum.reduceat(np.minimum.reduceat(d, starts, axis=0), starts, axis=1)
    np.fill_diagonal(out, 0.0)
    return out


def within_group_pairs(ds: Dataset):
    """
    Index arrays (i, j, g) over all within-group pairs with i before j in
    group order.
    """
    rows_i, rows_j, labels = [], [], []
    for g, members in enumerate(ds.group_index.groups):
        if len(members) < 2:
            continue
        a, b = np.triu_indices(len(members), k=1)
        rows_i.append(members[a])
        rows_j.append(members[b])
        labels.append(np.full(len(a), g))
    if not rows_i:
        empty = np.empty(0, dtype=int)
        return empty, empty, empty
    return np.concatenate(rows_i), np.concatenate(rows_j), np.concatenate(labels)


def describe(ds: Dataset, log_response=True) -> pd.DataFrame:
    """Obs / Average / Std.Dev. / Min / Max per variable."""
    columns = {ds.response_name: ds.y}
    if log_response:
        positive = ds.y[ds.y > 0]
        columns[f"ln{ds.response_name}"] = np.log(positive)
    for j, name in enumerate(ds.names):
        columns[name] = ds.X[:, j]
    rows = []
    for name, values in columns.items():
        rows.append({
            "variable": name,
            "obs": int(values.size),
            "average": float(values.mean()) if values.size else float("nan"),
            "std_dev": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "min": float(values.min()) if values.size else float("nan"),
            "max": float(values.max()) if values.size else float("nan"),
        })
    return pd.DataFrame(rows)


def grouping_table(ds: Dataset) -> pd.DataFrame:
    sizes = ds.group_index.sizes
    return pd.DataFrame({"group": np.arange(len(sizes)), "count": sizes, "share": sizes / sizes.sum()})
