from types import SimpleNamespace

import numpy as np
import pytest

from src.core.errors import BadlyConditionedError, DataValidationError, NoInformativePairsError
from src.core.families import FamilySpec
from src.core.working_correlation import (MAX_CORR, RHO_MIN, CorrelationKind, CorrelationModel, RhoEstimator,
                                          SpatialParams, WeightMode, WorkingModel, build_from_matrices,
                                          build_weight_matrices, distance_correlation, estimate_exchangeable,
                                          estimate_rho_direct, estimate_rho_lsq, estimate_tau2,
                                          exchangeable_bounds, prentice_fit)
from src.entities.spatial_dataset import Dataset, GroupIndex


def test_distance_correlations():
    d = np.array([0.0, 1.0, 2.0])
    assert np.allclose(distance_correlation(CorrelationKind.CRESSIE, d, 2.0), [1.0, np.exp(-0.5), np.exp(-1.0)])
    assert np.allclose(distance_correlation(CorrelationKind.INVDIST, d, 0.5), [1.0, 0.5, 0.25])
    assert np.allclose(distance_correlation(CorrelationKind.EXPMINUS1, d, 1.0),
                       [1.0, 1.0, np.expm1(0.5) / (np.e - 1)])


def test_model_validation():
    with pytest.raises(DataValidationError):
        CorrelationModel.exchangeable(1.0)
    with pytest.raises(DataValidationError):
        CorrelationModel.cressie(0.0)
    with pytest.raises(DataValidationError):
        CorrelationModel.inverse_distance(-0.1)
    assert CorrelationModel.exp_minus_one(0.3).to_dict() == {"kind": "expminus1", "param": 0.3}


def test_matrix_clips_distance_models():
    d = np.array([[0.0, 1.0], [1.0, 0.0]])
    r, clipped = CorrelationModel.exp_minus_one(2.0).matrix(d)
    assert clipped == 1
    assert r[0, 1] == MAX_CORR
    assert np.allclose(np.diag(r), 1.0)

    r, clipped = CorrelationModel.exchangeable(0.3).matrix(np.zeros((3, 3)))
    assert clipped == 0
    assert np.allclose(r[~np.eye(3, dtype=bool)], 0.3)


def test_cli_names_map_to_models():
    assert WorkingModel.parse("poisson-structural").correlation_kind is CorrelationKind.EXPMINUS1
    assert WorkingModel.parse("poisson-structural").weight_mode is WeightMode.POISSON_STRUCTURAL
    assert WorkingModel.parse("cressie").weight_mode is WeightMode.GENERIC
    assert RhoEstimator.parse("LSQ") is RhoEstimator.LSQ
    with pytest.raises(DataValidationError) as err:
        WorkingModel.parse("ar1")
    assert err.value.column == "working"


def test_tau2_recovers_exact_overdispersion():
    m = np.array([1.0, 2.0, 3.0, 5.0])
    u = np.sqrt(m + 0.5 * m ** 2)
    assert np.isclose(estimate_tau2(SimpleNamespace(fitted_means=m, residuals=u)), 0.5)
    assert estimate_tau2(SimpleNamespace(fitted_means=m, residuals=np.zeros(4))) == 0.0


def test_spatial_params_clamp_tau2():
    assert SpatialParams(-0.2).tau2 == 0.0


def test_lsq_recovers_noiseless_rho():
    d = np.linspace(0.5, 5.0, 40)
    fit = estimate_rho_lsq(np.exp(-d / 2.0), d, CorrelationKind.CRESSIE)
    assert abs(fit.rho - 2.0) < 1e-5
    assert fit.objective < 1e-12
    assert not fit.degenerate
    assert fit.n_pairs == 40

    far = np.linspace(1.0, 5.0, 40)
    fit = estimate_rho_lsq(0.3 * 0.8 / far, far, CorrelationKind.INVDIST, scale=0.3)
    assert abs(fit.rho - 0.8) < 1e-5


def test_lsq_needs_pairs():
    with pytest.raises(NoInformativePairsError):
        estimate_rho_lsq(np.array([]), np.array([]), CorrelationKind.CRESSIE)
    with pytest.raises(ValueError):
        estimate_rho_lsq(np.ones(3), np.ones(3), CorrelationKind.EXCHANGEABLE)


def _four_points():
    return Dataset(y=np.zeros(4), X=np.ones((4, 1)), coords=[[0, 0], [1, 0], [5, 0], [5, 2]],
                   group_id=[0, 0, 1, 1])


def test_direct_rho_on_within_pairs():
    ds = _four_points()
    m = np.ones(4)
    u = np.array([1.0, 1.0, 2.0, 0.5])
    fit = estimate_rho_direct(SimpleNamespace(residuals=u, fitted_means=m), ds)
    expected = np.mean([np.log(2.0) * 1.0, np.log(2.0) * 2.0])
    assert np.isclose(fit.rho, expected)
    assert fit.n_pairs == 2 and fit.n_skipped == 0


def test_direct_rho_skips_non_positive_arguments():
    ds = _four_points()
    u = np.array([1.0, -2.0, 2.0, 0.5])
    fit = estimate_rho_direct(SimpleNamespace(residuals=u, fitted_means=np.ones(4)), ds)
    assert fit.n_skipped == 1
    assert np.isclose(fit.rho, np.log(2.0) * 2.0)

    u = np.array([1.0, -2.0, 2.0, -1.0])
    with pytest.raises(NoInformativePairsError):
        estimate_rho_direct(SimpleNamespace(residuals=u, fitted_means=np.ones(4)), ds)


def test_exchangeable_moment_estimator():
    gi = GroupIndex.from_labels([0, 0, 1, 1])
    res = SimpleNamespace(std_residuals=np.array([1.0, 2.0, 3.0, -1.0]))
    assert np.isclose(estimate_exchangeable(res, gi), -0.5)

    res = SimpleNamespace(std_residuals=np.array([3.0, 3.0, 3.0, 3.0]))
    assert estimate_exchangeable(res, gi) == exchangeable_bounds(2)[1]

    with pytest.raises(NoInformativePairsError):
        estimate_exchangeable(res, GroupIndex.from_labels([0, 1, 2, 3]))


def test_exchangeable_bounds_keep_blocks_positive_definite():
    lo, hi = exchangeable_bounds(5)
    for pi in (lo, hi):
        r = np.full((5, 5), pi)
        np.fill_diagonal(r, 1.0)
        assert np.linalg.eigvalsh(r).min() > 0.0


def test_weight_matrices_generic(count_ds, poisson_first):
    gi = count_ds.group_index
    beta = poisson_first.beta_check
    m = np.exp(count_ds.X @ beta)
    wm = build_weight_matrices(count_ds, gi, FamilySpec.poisson(), beta,
                               SpatialParams(0.0, CorrelationModel.exchangeable(0.25)))
    members = gi.groups[0]
    w = wm.matrices[0]
    assert np.allclose(np.diag(w), m[members])
    assert np.isclose(w[0, 1], 0.25 * np.sqrt(m[members[0]] * m[members[1]]))
    rhs = np.arange(len(members), dtype=float)
    assert np.allclose(wm.solve(0, rhs), np.linalg.solve(w, rhs))
    assert wm.n_repaired == 0

    indep = build_weight_matrices(count_ds, gi, FamilySpec.poisson(), beta, SpatialParams())
    assert np.allclose(indep.matrices[1], np.diag(m[gi.groups[1]]))


def test_weight_matrices_structural(count_ds, poisson_first):
    gi = count_ds.group_index
    beta = poisson_first.beta_check
    m = np.exp(count_ds.X @ beta)
    sp = SpatialParams(0.4, CorrelationModel.exp_minus_one(0.5))
    wm = build_weight_matrices(count_ds, gi, FamilySpec.poisson(), beta, sp, WeightMode.POISSON_STRUCTURAL)
    a, b = gi.groups[2][:2]
    d = count_ds.distances[a, b]
    w = wm.matrices[2]
    assert np.isclose(w[0, 0], m[a] * (1 + 0.4 * m[a]))
    assert np.isclose(w[0, 1], 0.4 * m[a] * m[b] * np.expm1(0.5 / d) / (np.e - 1))

    with pytest.raises(DataValidationError):
        build_weight_matrices(count_ds, gi, FamilySpec.probit(), beta, sp, WeightMode.POISSON_STRUCTURAL)


def test_ridge_repair():
    wm = build_from_matrices([np.ones((2, 2)), np.eye(2)], [np.ones(2), np.ones(2)], WeightMode.GENERIC)
    assert wm.n_repaired == 1
    assert np.all(np.linalg.eigvalsh(wm.matrices[0]) > 0.0)
    assert np.allclose(wm.matrices[1], np.eye(2))

    with pytest.raises(BadlyConditionedError):
        build_from_matrices([np.array([[1.0, 2.0], [2.0, 1.0]])], [np.ones(2)], WeightMode.GENERIC)


def test_scaled_weights():
    wm = build_from_matrices([2.0 * np.eye(3)], [2.0 * np.ones(3)], WeightMode.GENERIC)
    assert np.allclose(wm.scaled(0.5).matrices[0], np.eye(3))


def test_prentice_fit_routes_by_model(count_ds, poisson_first):
    gi = count_ds.group_index
    sp = prentice_fit(poisson_first, gi, "independence")
    assert sp.corr.kind is CorrelationKind.INDEPENDENCE
    sp = prentice_fit(poisson_first, gi, "exchangeable")
    assert sp.corr.kind is CorrelationKind.EXCHANGEABLE
    sp = prentice_fit(poisson_first, gi, "poisson-structural", count_ds)
    assert sp.corr.kind is CorrelationKind.EXPMINUS1
    assert sp.tau2 >= 0.0 and sp.corr.param > 0.0
    sp = prentice_fit(poisson_first, gi, "cressie", count_ds)
    assert sp.corr.kind is CorrelationKind.CRESSIE
    with pytest.raises(ValueError):
        prentice_fit(poisson_first, gi, "cressie")


def test_structural_matrix_by_hand():
    # m = (1, 2), tau2 = 1, off-diagonal correlation 0.5
    ds = Dataset(y=np.ones(2), X=[[0.0], [np.log(2.0)]], coords=[[0, 0], [1, 0]], group_id=[0, 0])
    sp = SpatialParams(1.0, CorrelationModel.exchangeable(0.5))
    wm = build_weight_matrices(ds, ds.group_index, FamilySpec.poisson(), [1.0], sp, WeightMode.POISSON_STRUCTURAL)
    assert np.allclose(wm.matrices[0], [[2.0, 1.0], [1.0, 6.0]], rtol=1e-12)
    assert np.allclose(wm.variances[0], [2.0, 6.0], rtol=1e-12)


def test_direct_rho_two_observations():
    ds = Dataset(y=np.zeros(2), X=np.ones((2, 1)), coords=[[0, 0], [2, 0]], group_id=[0, 0])
    res = SimpleNamespace(residuals=np.array([1.0, np.e - 1.0]), fitted_means=np.ones(2))
    fit = estimate_rho_direct(res, ds)
    assert fit.rho == pytest.approx(2.0, rel=1e-12)


def test_lsq_matches_grid_search():
    rng = np.random.default_rng(20)
    d = rng.uniform(0.5, 5.0, size=20)
    products = np.exp(-d / 1.5) + rng.normal(scale=0.05, size=20)
    fit = estimate_rho_lsq(products, d, CorrelationKind.CRESSIE)

    grid = np.linspace(RHO_MIN, 10.0 * d.max(), 1_000_000)
    best_value, best_rho = np.inf, None
    for chunk in np.array_split(grid, 20):
        fitted = np.clip(np.exp(-d[None, :] / chunk[:, None]), -MAX_CORR, MAX_CORR)
        values = np.sum((products[None, :] - fitted) ** 2, axis=1)
        k = int(np.argmin(values))
        if values[k] < best_value:
            best_value, best_rho = float(values[k]), float(chunk[k])
    step = grid[1] - grid[0]
    assert abs(fit.rho - best_rho) <= 2 * step
    assert fit.objective <= best_value + 1e-12
