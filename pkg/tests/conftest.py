import numpy as np
import pytest
import scipy.sparse as sparse

from ddlod.core.assembly import assemble
from ddlod.core.coeff import make_heterogeneous, make_identity
from ddlod.core.grid import build_hierarchy


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run full-resolution reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def hierarchy():
    """H = 1/4, h = 1/16, rho = 1/4"""
    return build_hierarchy(4, 16, 4)


@pytest.fixture(scope="session")
def field16():
    return make_heterogeneous(2, 4, 1.0, 10.0, 16)


@pytest.fixture(scope="session")
def ops16(hierarchy, field16):
    return assemble(hierarchy.fine, field16, hierarchy.control)


@pytest.fixture(scope="session")
def identity_ops16(hierarchy):
    return assemble(hierarchy.fine, make_identity(16), hierarchy.control)


def laplacian_1d(n: int):
    return sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1], format="csr")
