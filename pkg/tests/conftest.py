import numpy as np
import pytest

from cstomo import geometry as geo

DESK_PITCH = 1.521


@pytest.fixture(scope="session")
def default_geometry():
    layout, beams = geo.build_layout()
    grid = geo.build_grid()
    L = geo.build_sensitivity_matrix(layout, beams, grid)
    return layout, beams, grid, L


@pytest.fixture(scope="session")
def desk_geometry():
    layout, beams = geo.build_layout()
    grid = geo.build_grid(geo.GridConfig(pixel_pitch=DESK_PITCH))
    L = geo.build_sensitivity_matrix(layout, beams, grid)
    return layout, beams, grid, L


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
