"""
Linear-exponential-family building blocks: conditional mean, its
derivatives in the linear index, the LEF variance map, per-observation
log-likelihood and quasi-score.

Poisson and NegBin II use the exponential mean exp(x'b); the Bernoulli
family uses the probit mean Phi(x'b).
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erfc, gammaln, ndtri

from src.core.errors import DataValidationError, MeanOverflowError

# Probit means are kept inside [EPS_MEAN, 1 - EPS_MEAN].
EPS_MEAN = 1e-10
# exp() overflows a double just above 709.78.
MAX_LINEAR_INDEX = 700.0

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / math.sqrt(2.0))


def normal_pdf(z):
    z = np.asarray(z, dtype=float)
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


class FamilyKind(Enum):
    POISSON = "poisson"
    NEGBIN2 = "nb2"
    PROBIT = "probit"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        aliases = {"negbin2": "nb2", "negbin": "nb2", "bernoulli": "probit"}
        key = aliases.get(str(value).lower(), str(value).lower())
        try:
            return cls(key)
        except ValueError as e:
            valid = ", ".join(m.value for m in cls)
            raise DataValidationError(f"unknown family '{value}' (valid: {valid})", column="family") from e


@dataclass(frozen=True)
class FamilySpec:
    """
    kind: Poisson, NegBin II (with fixed tau2 >= 0) or Bernoulli probit.

    nb2_exponent selects the power k in the NegBin II dispersion
    alpha = (tau2)^(-k) used by loglik; the printed likelihood uses k = 2,
    the conventional NB2 likelihood k = 1. The variance function is
    m(1 + m tau2) for either choice.
    """

    kind: FamilyKind = FamilyKind.POISSON
    tau2: float = 0.0
    nb2_exponent: int = 2

    def __post_init__(self):
        object.__setattr__(self, "kind", FamilyKind.parse(self.kind))
        if not np.isfinite(self.tau2) or self.tau2 < 0.0:
            raise DataValidationError(f"tau2 must be finite and >= 0, got {self.tau2}", column="tau2")
        if self.nb2_exponent not in (1, 2):
            raise DataValidationError("nb2_exponent must be 1 or 2", column="nb2_exponent")

    @classmethod
    def poisson(cls):
        return cls(FamilyKind.POISSON)

    @classmethod
    def negbin2(cls, tau2, nb2_exponent=2):
        return cls(FamilyKind.NEGBIN2, float(tau2), nb2_exponent)

    @classmethod
    def probit(cls):
        return cls(FamilyKind.PROBIT)

    @property
    def name(self):
        return self.kind.value

    @property
    def is_count(self):
        return self.kind is not FamilyKind.PROBIT

    @property
    def response_kind(self):
        return "count" if self.is_count else "binary"

    # -- functions of the linear index eta = x'b -------------------------

    def _exp(self, eta):
        eta = np.asarray(eta, dtype=float)
        if eta.size and np.max(eta) > MAX_LINEAR_INDEX:
            raise MeanOverflowError(np.max(eta))
        return np.exp(eta)

    def mean(self, eta):
        if self.is_count:
            return self._exp(eta)
        return np.clip(normal_cdf(eta), EPS_MEAN, 1.0 - EPS_MEAN)

    def dmean(self, eta):
        """dm/d eta"""
        if self.is_count:
            return self._exp(eta)
        return normal_pdf(eta)

    def d2mean(self, eta):
        """d2m/d eta2"""
        if self.is_count:
            return self._exp(eta)
        eta = np.asarray(eta, dtype=float)
        return -eta * normal_pdf(eta)

    def variance(self, m):
        m = np.asarray(m, dtype=float)
        if self.kind is FamilyKind.PROBIT:
            if np.any((m <= 0.0) | (m >= 1.0)):
                raise DataValidationError("Bernoulli mean outside (0, 1)", column="mean")
            return m * (1.0 - m)
        if np.any(m <= 0.0):
            raise DataValidationError("count mean must be positive", column="mean")
        if self.kind is FamilyKind.NEGBIN2:
            return m * (1.0 + m * self.tau2)
        return m

    def loglik(self, y, eta):
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        if self.kind is FamilyKind.POISSON:
            return y * eta - self._exp(eta) - gammaln(y + 1.0)
        if self.kind is FamilyKind.PROBIT:
            m = self.mean(eta)
            return y * np.log(m) + (1.0 - y) * np.log1p(-m)
        return self._negbin_loglik(y, eta, self.nb2_exponent)

    def _negbin_loglik(self, y, eta, exponent):
        mu = self._exp(eta)
        if self.tau2 == 0.0:
            # alpha -> infinity limit of the printed likelihood
            return y * eta - mu
        alpha = self.tau2 ** (-exponent)
        return (alpha * np.log(alpha / (alpha + mu))
                + y * np.log(mu / (alpha + mu))
                + gammaln(y + alpha) - gammaln(alpha))

    def quasi_loglik(self, y, eta):
        """
        Objective whose gradient is the LEF quasi-score. Equal to loglik
        except for NegBin II with nb2_exponent=2, where the k=1 likelihood
        (the LEF member with variance m(1 + m tau2)) is used.
        """
        if self.kind is FamilyKind.NEGBIN2:
            return self._negbin_loglik(np.asarray(y, dtype=float), np.asarray(eta, dtype=float), 1)
        return self.loglik(y, eta)

    def start_intercept(self, ybar):
        """Link-transformed sample mean used to start the intercept."""
        if self.is_count:
            return math.log(ybar) if ybar > 0 else 0.0
        ybar = min(max(ybar, 1e-6), 1.0 - 1e-6)
        return float(ndtri(ybar))


# -- per-observation operations on (x, beta) -------------------------------

def _index(x, beta):
    x = np.asarray(x, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if x.shape[-1] != beta.shape[0]:
        raise ValueError(f"covariate row has {x.shape[-1]} entries, beta has {beta.shape[0]}")
    return x @ beta


def mean(f: FamilySpec, x, beta):
    return float(f.mean(_index(x, beta)))


def mean_gradient(f: FamilySpec, x, beta):
    x = np.asarray(x, dtype=float)
    return f.dmean(_index(x, beta)) * x


def lef_variance(f: FamilySpec, m):
    return float(f.variance(m))


def loglik_obs(f: FamilySpec, y_i, x_i, beta):
    return float(f.loglik(y_i, _index(x_i, beta)))


def score_obs(f: FamilySpec, y_i, x_i, beta):
    x_i = np.asarray(x_i, dtype=float)
    eta = _index(x_i, beta)
    m = f.mean(eta)
    return f.dmean(eta) * x_i * (y_i - m) / f.variance(m)
