"""
Per-replication random streams.

Every replication draws from its own counter-based generator keyed by
(seed, replication index), so a replication's data never depend on which
worker ran it or in what order.
"""

import numpy as np
from scipy.special import ndtri

from src.core.errors import DataValidationError

_UNIT = 2.0 ** -53
_SEED_LIMIT = 2 ** 64


def check_seed(seed):
    seed = int(seed)
    if not 0 <= seed < _SEED_LIMIT:
        raise DataValidationError(f"seed must be an unsigned 64-bit integer, got {seed}", column="seed")
    return seed


def replication_rng(seed, rep) -> np.random.Generator:
    """Philox generator for replication `rep` of a run seeded with `seed`."""
    seed = check_seed(seed)
    if rep < 0:
        raise DataValidationError(f"replication index must be >= 0, got {rep}", column="rep")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, int(rep)])))


def open_uniform(rng: np.random.Generator, size):
    """Uniforms on the open interval (0, 1) with 53 bits of resolution."""
    k = rng.integers(0, 2 ** 53, size=size, dtype=np.int64)
    return (k.astype(float) + 0.5) * _UNIT


def standard_normal(rng: np.random.Generator, size):
    """N(0, 1) draws by inverse CDF, identical on every platform."""
    return ndtri(open_uniform(rng, size))


def normal(rng: np.random.Generator, size, mean=0.0, var=1.0):
    return mean + np.sqrt(var) * standard_normal(rng, size)


def uniform(rng: np.random.Generator, size, low=0.0, high=1.0):
    return low + (high - low) * open_uniform(rng, size)
