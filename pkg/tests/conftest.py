import numpy as np
import pytest

from petrecon.geometry import ImageGrid, ScanGeometry, get_projector


@pytest.fixture(scope="session")
def small_grid():
    return ImageGrid(16, 16)


@pytest.fixture(scope="session")
def small_geom(small_grid):
    return ScanGeometry.parallel(small_grid, 24, 24)


@pytest.fixture(scope="session")
def desk_grid():
    return ImageGrid(64, 64)


@pytest.fixture(scope="session")
def desk_geom(desk_grid):
    return ScanGeometry.parallel(desk_grid, 96, 96)


@pytest.fixture(scope="session")
def desk_projector(desk_grid, desk_geom):
    return get_projector(desk_grid, desk_geom)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
