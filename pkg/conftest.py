import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.families import FamilySpec  # noqa: E402
from src.core.pooled_qmle import fit_pqmle  # noqa: E402
from src.simulation.dgp import DgpSpec, generator_for  # noqa: E402
from src.simulation.random_streams import replication_rng  # noqa: E402


@pytest.fixture(scope="session")
def count_ds():
    """64 lattice points in 16 groups of 4, count Case 1 with rho = 0.5."""
    return generator_for(DgpSpec("count1", rho=0.5, side=8)).draw(replication_rng(11, 0))


@pytest.fixture(scope="session")
def probit_ds():
    return generator_for(DgpSpec("probit1", rho=0.5, side=10)).draw(replication_rng(5, 0))


@pytest.fixture(scope="session")
def poisson_first(count_ds):
    return fit_pqmle(count_ds, FamilySpec.poisson())


@pytest.fixture(scope="session")
def probit_first(probit_ds):
    return fit_pqmle(probit_ds, FamilySpec.probit())
