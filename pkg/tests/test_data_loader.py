import json

import numpy as np
import pytest

from src.core.errors import CsvParseError, DataValidationError
from src.utils.data_loader import CsvSchema, load_csv, load_schema, save_csv, tile_groups

SCHEMA = {"response": "y", "covariates": ["x"], "coords": ["lat", "lon"]}


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_save_then_load(tmp_path, count_ds):
    schema = save_csv(count_ds, tmp_path / "sim.csv")
    assert schema.group == "group_id" and not schema.intercept
    back = load_csv(tmp_path / "sim.csv", schema)
    assert back.names == count_ds.names
    assert np.array_equal(back.group_id, count_ds.group_id)
    assert np.array_equal(back.y, count_ds.y)
    assert np.array_equal(back.X, count_ds.X)
    assert np.array_equal(back.coords, count_ds.coords)


def test_seventeen_digit_values_parse_exactly(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.15026738914638696,0,0\n2,-1.2345678901234567e-05,0,1\n")
    ds = load_csv(path, SCHEMA)
    assert ds.X[0, 0] == 0.15026738914638696
    assert ds.X[1, 0] == -1.2345678901234567e-05


def test_intercept_appended_last(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.5,0,0\n2,1.5,0,1\n3,2.5,3,3\n")
    ds = load_csv(path, SCHEMA)
    assert ds.names == ("x", "const")
    assert np.all(ds.X[:, -1] == 1.0)
    assert ds.meta["n_dropped"] == 0


def test_default_grouping_uses_two_unit_tiles(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.5,0,0\n2,1.5,0,1\n3,2.5,3,3\n")
    ds = load_csv(path, SCHEMA)
    assert list(ds.group_id) == [0, 0, 1]
    assert list(tile_groups(np.array([[0.0, 0.0], [1.9, 1.9], [2.0, 0.0]]))) == [0, 0, 1]


def test_singletons(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.5,0,0\n2,1.5,0,1\n3,2.5,3,3\n")
    ds = load_csv(path, dict(SCHEMA, grouping="singletons"))
    assert ds.n_groups == 3


def test_string_group_labels_in_first_appearance_order(tmp_path):
    path = _write(tmp_path / "d.csv",
                  "y,x,lat,lon,prov\n1,0.5,0,0,b\n2,1.5,0,1,a\n3,2.5,3,3,b\n0,1.0,5,5,c\n")
    ds = load_csv(path, dict(SCHEMA, group="prov"))
    assert list(ds.group_id) == [0, 1, 0, 2]


def test_contiguous_integer_groups_are_kept(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon,g\n1,0.5,0,0,1\n2,1.5,0,1,0\n3,2.5,3,3,1\n")
    ds = load_csv(path, dict(SCHEMA, group="g"))
    assert list(ds.group_id) == [1, 0, 1]


def test_missing_column(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat\n1,0.5,0\n")
    with pytest.raises(DataValidationError) as err:
        load_csv(path, SCHEMA)
    assert err.value.column == "lon"


def test_non_numeric_cell_reports_line(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.5,0,0\n2,1.5,0,1\n3,abc,3,3\n")
    with pytest.raises(CsvParseError) as err:
        load_csv(path, SCHEMA)
    assert err.value.line == 4
    assert "abc" in str(err.value)


def test_line_numbers_survive_dropped_rows(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n,0.5,0,0\n2,1.5,0,1\n3,abc,3,3\n")
    with pytest.raises(CsvParseError) as err:
        load_csv(path, SCHEMA)
    assert err.value.line == 4


def test_missing_response_rows_are_dropped(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,0.5,0,0\n,1.5,0,1\n3,2.5,3,3\n")
    ds = load_csv(path, SCHEMA)
    assert ds.n == 2
    assert ds.meta["n_dropped"] == 1


def test_missing_covariate_is_an_error(tmp_path):
    path = _write(tmp_path / "d.csv", "y,x,lat,lon\n1,,0,0\n2,1.5,0,1\n")
    with pytest.raises(DataValidationError) as err:
        load_csv(path, SCHEMA)
    assert err.value.column == "x"


def test_empty_and_duplicate_header(tmp_path):
    with pytest.raises(CsvParseError) as err:
        load_csv(_write(tmp_path / "empty.csv", ""), SCHEMA)
    assert err.value.line == 1
    with pytest.raises(CsvParseError):
        load_csv(_write(tmp_path / "dup.csv", "y,x,x,lat,lon\n1,2,3,0,0\n"), SCHEMA)


def test_missing_file(tmp_path):
    with pytest.raises(DataValidationError) as err:
        load_csv(tmp_path / "nope.csv", SCHEMA)
    assert "nope.csv" in str(err.value)


def test_schema_validation(tmp_path):
    with pytest.raises(DataValidationError):
        CsvSchema(response="y", covariates=(), coords=("a",))
    with pytest.raises(DataValidationError):
        CsvSchema(response="y", covariates=(), coords=("a", "b"), intercept=False)
    with pytest.raises(DataValidationError):
        CsvSchema.from_dict(dict(SCHEMA, weights="w"))
    with pytest.raises(DataValidationError):
        CsvSchema.from_dict({"response": "y"})

    path = tmp_path / "schema.json"
    path.write_text(json.dumps(dict(SCHEMA, metric="haversine")), encoding="utf-8")
    assert load_schema(path).metric == "haversine"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(DataValidationError):
        load_schema(path)
