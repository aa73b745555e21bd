import numpy as np
import pytest

from perilayer.cell import transmission_constants
from perilayer.geometry import Disk, DomainSpec, PeriodicityCell
from perilayer.macro import solve_limit
from perilayer.mesh import mesh_limit_split

DISK = Disk((0.5, 0.0), 0.25)


@pytest.fixture(scope="session")
def disk_cell():
    return PeriodicityCell(DISK)


@pytest.fixture(scope="session")
def disk_tc(disk_cell):
    return transmission_constants(disk_cell)


@pytest.fixture(scope="session")
def empty_tc():
    return transmission_constants(PeriodicityCell())


@pytest.fixture(scope="session")
def domain():
    return DomainSpec()


@pytest.fixture(scope="session")
def limit_mesh(domain):
    return mesh_limit_split(domain, 0.05)


@pytest.fixture(scope="session")
def u00(domain, limit_mesh):
    return solve_limit(domain, limit_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
