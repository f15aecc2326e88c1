"""
Shared fixtures for the membrane solver tests.

Benchmark-scale tests are marked ``slow`` and only run with ``--runslow``.
"""

import numpy as np
import pytest

from background_mesh import build_structured
from level_set import PlaneLevelSet, classify, discretize


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run benchmark-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark-scale test, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# =============================================================================
# Meshes
# =============================================================================


@pytest.fixture
def unit_hex():
    """Single hexahedron filling the unit cube."""
    return build_structured(((0, 0, 0), (1, 1, 1)), 1, 1, 1, "hex8")


@pytest.fixture
def unit_tets():
    """Unit cube split into six tetrahedra."""
    return build_structured(((0, 0, 0), (1, 1, 1)), 1, 1, 1, "tet4")


@pytest.fixture
def cylinder_box_mesh():
    """Coarse structured tet mesh of the cylinder benchmark box."""
    return build_structured(((0.0, -1.2, -1.2), (4.0, 1.2, 1.2)), 10, 6, 6, "tet4")


@pytest.fixture(params=["tet4", "hex8"])
def tilted_band(request):
    """Active band of a tilted plane through a 3x3x3 tet or hex mesh."""
    mesh = build_structured(((0, 0, 0), (1, 1, 1)), 3, 3, 3, request.param)
    return classify(discretize(PlaneLevelSet(normal=(0.3, 0.2, 1.0), offset=0.55), mesh))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
