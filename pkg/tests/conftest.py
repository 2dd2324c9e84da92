import numpy as np
import pytest

from kinetic_deeponet.collision import KernelSpec, assemble_collision_matrix
from kinetic_deeponet.quadrature import gauss_legendre_slab, tensorized_sphere_grid

CRITERIA = {}


def pytest_addoption(parser):
    parser.addoption("--full-scale", action="store_true", default=False,
                     help="also run the full-size training checks (tens of minutes)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--full-scale"):
        return
    skip = pytest.mark.skip(reason="full-size run; enable with --full-scale")
    for item in items:
        if "full_scale" in item.keywords:
            item.add_marker(skip)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        for line in CRITERIA[key]:
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record a one-line verdict for an acceptance criterion."""

    def _report(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"
        CRITERIA.setdefault(number, []).append(line)
        print(line)
        return passed

    return _report


@pytest.fixture(scope="session")
def slab():
    return gauss_legendre_slab(100)


@pytest.fixture(scope="session")
def sphere_small():
    return tensorized_sphere_grid(4, 8)


@pytest.fixture(scope="session")
def iso_slab(slab):
    return assemble_collision_matrix(slab, KernelSpec())


@pytest.fixture(scope="session")
def hg_slab(slab):
    return assemble_collision_matrix(slab, KernelSpec("henyey_greenstein", 0.9))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
