import numpy as np
import pytest
from scipy import stats

from src.core.errors import DataValidationError, MeanOverflowError
from src.core.families import (EPS_MEAN, FamilyKind, FamilySpec, lef_variance, loglik_obs, mean, mean_gradient,
                               score_obs)

FAMILIES = [FamilySpec.poisson(), FamilySpec.negbin2(0.7), FamilySpec.probit()]


def _response(f, rng, size):
    if f.is_count:
        return rng.poisson(2.0, size=size).astype(float)
    return (rng.uniform(size=size) < 0.4).astype(float)


def test_parse_aliases_and_errors():
    assert FamilyKind.parse("negbin2") is FamilyKind.NEGBIN2
    assert FamilyKind.parse("Poisson") is FamilyKind.POISSON
    with pytest.raises(DataValidationError) as err:
        FamilyKind.parse("gamma")
    assert "valid" in str(err.value)


def test_spec_validation():
    with pytest.raises(DataValidationError):
        FamilySpec.negbin2(-0.1)
    with pytest.raises(DataValidationError):
        FamilySpec(FamilyKind.NEGBIN2, 0.5, nb2_exponent=3)


def test_variance_functions():
    m = np.array([0.5, 2.0, 7.0])
    assert np.allclose(FamilySpec.poisson().variance(m), m)
    assert np.allclose(FamilySpec.negbin2(0.3).variance(m), m * (1 + 0.3 * m))
    assert np.isclose(lef_variance(FamilySpec.probit(), 0.25), 0.1875)
    with pytest.raises(DataValidationError):
        FamilySpec.poisson().variance(np.array([0.0]))
    with pytest.raises(DataValidationError):
        FamilySpec.probit().variance(np.array([1.0]))


def test_probit_mean_is_clamped():
    f = FamilySpec.probit()
    assert mean(f, [1.0], [40.0]) == 1.0 - EPS_MEAN
    assert mean(f, [1.0], [-40.0]) == EPS_MEAN
    assert np.isclose(mean(f, [1.0, 2.0], [0.1, 0.2]), stats.norm.cdf(0.5))


def test_exponential_mean_overflow():
    with pytest.raises(MeanOverflowError):
        mean(FamilySpec.poisson(), [1.0], [800.0])


def test_poisson_loglik_matches_pmf():
    y = np.array([0.0, 1.0, 4.0, 9.0])
    eta = np.array([0.1, -0.3, 1.2, 2.0])
    ll = FamilySpec.poisson().loglik(y, eta)
    assert np.allclose(ll, stats.poisson.logpmf(y, np.exp(eta)), rtol=1e-12)


def test_negbin_loglik_with_unit_exponent_matches_pmf_up_to_factorial():
    tau2 = 0.4
    f = FamilySpec.negbin2(tau2, nb2_exponent=1)
    alpha = 1.0 / tau2
    y = np.array([0.0, 2.0, 5.0])
    eta = np.array([0.2, 0.9, 1.5])
    mu = np.exp(eta)
    expected = stats.nbinom.logpmf(y, alpha, alpha / (alpha + mu)) + np.array([0.0, np.log(2.0), np.log(120.0)])
    assert np.allclose(f.loglik(y, eta), expected, rtol=1e-10)


def test_negbin_loglik_zero_dispersion_limit():
    f = FamilySpec.negbin2(0.0)
    y, eta = np.array([3.0]), np.array([0.4])
    assert np.allclose(f.loglik(y, eta), 3.0 * 0.4 - np.exp(0.4))


def test_negbin_printed_exponent_uses_tau2_squared():
    y, eta = np.array([2.0]), np.array([0.5])
    printed = FamilySpec.negbin2(0.5, nb2_exponent=2).loglik(y, eta)
    conventional = FamilySpec.negbin2(0.25, nb2_exponent=1).loglik(y, eta)
    assert np.allclose(printed, conventional)


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f.name)
def test_score_matches_quasi_loglik_gradient(f):
    rng = np.random.default_rng(3)
    h = 1e-6
    for _ in range(20):
        x = np.r_[1.0, rng.normal(scale=0.5, size=2)]
        beta = rng.normal(scale=0.3, size=3)
        y = float(_response(f, rng, 1)[0])
        numeric = np.zeros(3)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            up = float(f.quasi_loglik(y, x @ (beta + e)))
            down = float(f.quasi_loglik(y, x @ (beta - e)))
            numeric[k] = (up - down) / (2 * h)
        analytic = score_obs(f, y, x, beta)
        assert np.allclose(analytic, numeric, rtol=1e-5, atol=1e-8)


@pytest.mark.parametrize("f", FAMILIES, ids=lambda f: f.name)
def test_mean_derivatives(f):
    eta = np.linspace(-2.0, 2.0, 9)
    h = 1e-5
    assert np.allclose(f.dmean(eta), (f.mean(eta + h) - f.mean(eta - h)) / (2 * h), rtol=1e-6, atol=1e-9)
    assert np.allclose(f.d2mean(eta), (f.dmean(eta + h) - f.dmean(eta - h)) / (2 * h), rtol=1e-5, atol=1e-8)


def test_mean_gradient_is_chain_rule():
    f = FamilySpec.poisson()
    x, beta = np.array([1.0, 2.0]), np.array([0.1, 0.3])
    assert np.allclose(mean_gradient(f, x, beta), np.exp(0.7) * x)


def test_loglik_obs_scalar():
    assert np.isclose(loglik_obs(FamilySpec.probit(), 1.0, [1.0], [0.0]), np.log(0.5))


def test_start_intercept():
    assert np.isclose(FamilySpec.poisson().start_intercept(np.e), 1.0)
    assert FamilySpec.poisson().start_intercept(0.0) == 0.0
    assert np.isclose(FamilySpec.probit().start_intercept(0.5), 0.0)
