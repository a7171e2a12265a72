import json
import os
import re
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from src.core.errors import CsvParseError, DataValidationError
from src.entities.spatial_dataset import Dataset, DistanceMetric
from src.utils.log import get_logger

logger = get_logger("DataLoader")

GROUP_COLUMN = "group_id"
CONST = "const"


@dataclass(frozen=True)
class CsvSchema:
    """Maps column roles to CSV column names. No inference: every role is named explicitly."""

    response: str
    covariates: tuple
    coords: tuple
    group: str = None
    metric: str = "euclidean"
    intercept: bool = True
    grouping: str = "blocks"

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "coords", tuple(self.coords))
        if not self.response:
            raise DataValidationError("schema must name a response column", column="response")
        if len(self.coords) != 2:
            raise DataValidationError("schema must name exactly two coordinate columns", column="coords")
        if not self.covariates and not self.intercept:
            raise DataValidationError("schema has no covariates and no intercept", column="covariates")
        DistanceMetric.parse(self.metric)
        if self.grouping not in ("blocks", "singletons"):
            raise DataValidationError(f"unknown grouping '{self.grouping}' (valid: blocks, singletons)",
                                      column="grouping")

    @classmethod
    def from_dict(cls, data):
        known = {"response", "covariates", "coords", "group", "metric", "intercept", "grouping"}
        unknown = set(data) - known
        if unknown:
            raise DataValidationError(f"unknown schema keys {sorted(unknown)}", column=sorted(unknown)[0])
        try:
            return cls(**data)
        except TypeError as e:
            raise DataValidationError(f"incomplete schema: {e}", column="schema") from e

    def to_dict(self):
        out = asdict(self)
        out["covariates"] = list(self.covariates)
        out["coords"] = list(self.coords)
        return out


def load_schema(path) -> CsvSchema:
    if not os.path.exists(path):
        raise DataValidationError(f"schema file not found: {path}", column="schema")
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataValidationError(f"schema file {path} is not valid JSON: {e}", column="schema") from e
    return CsvSchema.from_dict(data)


def _line_of(message):
    found = re.search(r"line (\d+)", str(message))
    return int(found.group(1)) if found else None


def _numeric(frame, column):
    """Column as float; a non-numeric cell raises with its CSV line (header is line 1)."""
    checked = pd.to_numeric(frame[column], errors="coerce")
    bad = checked.isna() & frame[column].notna()
    if bad.any():
        label = bad.index[bad.to_numpy()][0]
        raise CsvParseError(f"non-numeric value '{frame[column].loc[label]}' in column '{column}'",
                            line=int(label) + 2)
    # pandas' fast string parser is not correctly rounded; float() is, so saved files read back bit-exact
    return frame[column].map(float, na_action="ignore").astype(float)


def _group_labels(column, name):
    """
    Integer labels already forming {0,...,G-1} are kept; anything else is
    mapped to 0-based ids in order of first appearance.
    """
    if column.isna().any():
        raise DataValidationError("missing group label", column=name)
    as_int = pd.to_numeric(column, errors="coerce")
    if as_int.notna().all() and np.all(as_int == np.floor(as_int)):
        labels = as_int.to_numpy(dtype=int)
        present = np.unique(labels)
        if present[0] == 0 and present[-1] == present.size - 1:
            return labels
    labels, _ = pd.factorize(column.astype(str), sort=False)
    return labels


def tile_groups(coords, tile=2.0):
    """Groups from square tiles of side `tile` anchored at the minimum coordinates."""
    cells = np.floor((coords - coords.min(axis=0)) / tile).astype(int)
    labels, _ = pd.factorize(pd.Series([f"{a},{b}" for a, b in cells]), sort=False)
    return labels


class DataLoader:
    """
    Reads a CSV file into a validated Dataset according to a CsvSchema.
    Rows with a missing response are dropped and counted; any other
    missing value is an error naming the column.
    """

    def __init__(self, filepath, schema: CsvSchema):
        self.filepath = filepath
        self.schema = schema
        self.n_dropped = 0

    def load(self) -> Dataset:
        if not os.path.exists(self.filepath):
            raise DataValidationError(f"input file not found: {self.filepath}", column="io.input")
        logger.info("loading %s", self.filepath)
        frame = self._read()
        s = self.schema
        needed = [s.response, *s.covariates, *s.coords] + ([s.group] if s.group else [])
        for column in needed:
            if column not in frame.columns:
                raise DataValidationError("missing from CSV header", column=column)

        y = _numeric(frame, s.response)
        keep = y.notna().to_numpy()
        self.n_dropped = int((~keep).sum())
        if self.n_dropped:
            logger.info("dropped %d rows with missing %s", self.n_dropped, s.response)
        frame = frame.loc[keep]
        if frame.empty:
            raise CsvParseError("no rows with a response value", line=1)

        columns = []
        for name in [*s.covariates, *s.coords]:
            values = _numeric(frame, name)
            if values.isna().any():
                raise DataValidationError(f"{int(values.isna().sum())} missing values", column=name)
            columns.append(values.to_numpy(dtype=float))
        X = np.column_stack(columns[:len(s.covariates)]) if s.covariates else np.empty((len(frame), 0))
        coords = np.column_stack(columns[len(s.covariates):])
        names = list(s.covariates)
        if s.intercept:
            X = np.column_stack([X, np.ones(len(frame))])
            names.append(CONST)

        if s.group:
            group_id = _group_labels(frame[s.group], s.group)
        elif s.grouping == "singletons":
            group_id = np.arange(len(frame))
        else:
            group_id = tile_groups(coords)

        ds = Dataset(y=_numeric(frame, s.response).to_numpy(dtype=float),
                     X=X, coords=coords, group_id=group_id, metric=s.metric, names=tuple(names),
                     response_name=s.response, meta={"source": str(self.filepath), "n_dropped": self.n_dropped})
        logger.info("%d observations, %d covariates, %d groups", ds.n, ds.p, ds.n_groups)
        return ds

    def _read(self):
        try:
            # pandas renames repeated headers ('a', 'a.1'), so duplicates are checked on the raw row
            header = pd.read_csv(self.filepath, header=None, nrows=1, dtype=str, encoding="utf-8").iloc[0]
            frame = pd.read_csv(self.filepath, sep=",", decimal=".", encoding="utf-8", dtype=str,
                                keep_default_na=True)
        except pd.errors.EmptyDataError as e:
            raise CsvParseError("empty file", line=1) from e
        except pd.errors.ParserError as e:
            raise CsvParseError(f"malformed CSV: {e}", line=_line_of(e)) from e
        except UnicodeDecodeError as e:
            raise CsvParseError(f"file is not UTF-8: {e}") from e
        repeated = header[header.duplicated()]
        if not repeated.empty:
            raise CsvParseError(f"duplicate header column '{repeated.iloc[0]}'", line=1)
        return frame


def load_csv(path, schema) -> Dataset:
    if isinstance(schema, dict):
        schema = CsvSchema.from_dict(schema)
    return DataLoader(path, schema).load()


def save_csv(ds: Dataset, path, coord_names=("coord_1", "coord_2")) -> CsvSchema:
    """
    Writes y, every column of X, coordinates and group labels with
    round-trip float formatting. Returns the schema that reads it back.
    """
    frame = pd.DataFrame({ds.response_name: ds.y})
    for j, name in enumerate(ds.names):
        frame[name] = ds.X[:, j]
    frame[coord_names[0]] = ds.coords[:, 0]
    frame[coord_names[1]] = ds.coords[:, 1]
    frame[GROUP_COLUMN] = ds.group_id
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    return CsvSchema(response=ds.response_name, covariates=tuple(ds.names), coords=tuple(coord_names),
                     group=GROUP_COLUMN, metric=ds.metric.value, intercept=False)
