import numpy as np
import pytest

from src.core.errors import DataValidationError
from src.entities.spatial_dataset import (Dataset, DistanceMetric, block_grouping, describe, group_distance,
                                          group_distance_matrix, grouping_table, pairwise_distance,
                                          within_group_pairs)
from src.simulation.lattice import LatticeSpec, make_lattice


def _small(y=None, group_id=None):
    lattice = make_lattice(LatticeSpec(4))
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(16), rng.normal(size=16)])
    y = np.arange(16.0) if y is None else y
    ds = lattice.dataset(y, X, ("const", "x"))
    if group_id is not None:
        ds = Dataset(y=ds.y, X=ds.X, coords=ds.coords, group_id=group_id, names=ds.names)
    return ds


def test_arrays_are_frozen():
    ds = _small()
    assert not ds.y.flags.writeable
    assert not ds.X.flags.writeable
    with pytest.raises(ValueError):
        ds.y[0] = 1.0


def test_default_names():
    ds = Dataset(y=[1.0, 2.0], X=[[1.0, 0.5], [1.0, 0.7]], coords=[[0, 0], [1, 1]], group_id=[0, 0])
    assert ds.names == ("x1", "x2")
    assert ds.n == 2 and ds.p == 2


def test_group_labels_must_be_contiguous():
    with pytest.raises(DataValidationError) as err:
        _small(group_id=np.repeat([0, 1, 3, 4], 4))
    assert err.value.column == "group_id"


def test_shape_and_finiteness_checks():
    with pytest.raises(DataValidationError):
        Dataset(y=[1.0, 2.0], X=[[1.0], [1.0], [1.0]], coords=[[0, 0], [1, 1]], group_id=[0, 0])
    with pytest.raises(DataValidationError) as err:
        Dataset(y=[1.0, 2.0], X=[[1.0, np.nan], [1.0, 0.0]], coords=[[0, 0], [1, 1]], group_id=[0, 0],
                names=("const", "bad"))
    assert err.value.column == "bad"
    with pytest.raises(DataValidationError):
        Dataset(y=[1.0], X=[[1.0]], coords=[[95.0, 0.0]], group_id=[0], metric="haversine")


def test_metric_parse():
    assert DistanceMetric.parse("HAVERSINE") is DistanceMetric.HAVERSINE_KM
    with pytest.raises(DataValidationError):
        DistanceMetric.parse("manhattan")


def test_pairwise_distance_symmetric():
    ds = _small()
    for i, j in [(0, 5), (3, 12), (7, 7)]:
        assert pairwise_distance(ds, i, j) == pairwise_distance(ds, j, i)
    assert pairwise_distance(ds, 7, 7) == 0.0
    assert np.isclose(pairwise_distance(ds, 0, 5), np.sqrt(2.0))
    with pytest.raises(IndexError):
        pairwise_distance(ds, 0, 16)


def test_haversine_one_degree_of_longitude_at_equator():
    ds = Dataset(y=[0.0, 0.0], X=[[1.0], [1.0]], coords=[[0.0, 0.0], [0.0, 1.0]], group_id=[0, 0],
                 metric="haversine")
    assert np.isclose(pairwise_distance(ds, 0, 1), 111.195, atol=1e-2)


def test_block_grouping_tiles():
    labels = block_grouping(4)
    assert labels.shape == (16,)
    assert np.bincount(labels).tolist() == [4, 4, 4, 4]
    assert labels[[0, 1, 4, 5]].tolist() == [0, 0, 0, 0]
    assert labels[[2, 3, 6, 7]].tolist() == [1, 1, 1, 1]
    with pytest.raises(DataValidationError):
        block_grouping(3)
    with pytest.raises(DataValidationError):
        block_grouping(4, block=3)


def test_group_distances():
    ds = _small()
    gd = group_distance_matrix(ds)
    assert np.allclose(np.diag(gd), 0.0)
    assert np.isclose(gd[0, 1], 1.0)
    assert np.isclose(gd[0, 3], np.sqrt(2.0))
    assert np.allclose(gd, gd.T)
    assert np.isclose(group_distance(ds, 2, 1), gd[2, 1])
    with pytest.raises(ValueError):
        group_distance(ds, 1, 1)


def test_within_group_pairs():
    ds = _small()
    i, j, g = within_group_pairs(ds)
    assert i.size == 4 * 6
    assert np.all(ds.group_id[i] == ds.group_id[j])
    assert np.all(ds.group_id[i] == g)

    singles = _small(group_id=np.arange(16))
    i, j, g = within_group_pairs(singles)
    assert i.size == 0


def test_check_response():
    ds = _small(y=np.r_[np.zeros(8), np.ones(8)])
    ds.check_response("binary")
    ds.check_response("count")
    counts = _small(y=np.r_[np.zeros(8), 2.0 * np.ones(8)])
    with pytest.raises(DataValidationError):
        counts.check_response("binary")
    with pytest.raises(DataValidationError):
        _small(y=np.full(16, 0.5)).check_response("count")


def test_describe_and_grouping_tables():
    ds = _small()
    table = describe(ds)
    assert table["variable"].tolist() == ["y", "lny", "const", "x"]
    assert table.set_index("variable").loc["lny", "obs"] == 15
    assert table.set_index("variable").loc["y", "max"] == 15.0

    groups = grouping_table(ds)
    assert groups["count"].tolist() == [4, 4, 4, 4]
    assert np.isclose(groups["share"].sum(), 1.0)


def test_with_response_keeps_structure():
    ds = _small()
    other = ds.with_response(np.ones(16))
    assert np.array_equal(other.coords, ds.coords)
    assert np.array_equal(other.group_id, ds.group_id)
    assert other.names == ds.names
