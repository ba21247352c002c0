import numpy as np
import pytest

from csdaplan.dose_planner import Prescription, StoppingPowers
from csdaplan.forms import TransportProblem
from csdaplan.material import build_material
from csdaplan.phase_space import EnergyGrid, PhaseSpaceGrid, Region, SpatialGrid

_LINES = []


@pytest.fixture
def report(capsys):
    """Print one acceptance line and keep it for the terminal summary."""
    def _report(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
    return _report


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)


def small_grid(dims=(3, 3, 2), level=0, n_energy=5, E0=1.5, Em=6.0, spacing=0.5):
    spg = SpatialGrid.box(dims, (spacing,) * 3)
    return PhaseSpaceGrid.build(spg, level, EnergyGrid.uniform(E0, Em, n_energy))


def toy_phantom():
    """4 x 4 x 2 voxels: central target, critical column at x = 3, normal tissue elsewhere."""
    lab = np.full((4, 4, 2), Region.NORMAL, dtype=np.uint8)
    lab[1:3, 1:3, :] = Region.TARGET
    lab[3, :, :] = Region.CRITICAL
    spg = SpatialGrid(np.zeros(3), np.full(3, 0.5), lab)
    return PhaseSpaceGrid.build(spg, 0, EnergyGrid.uniform(1.5, 4.0, 4))


@pytest.fixture(scope="session")
def small_problem():
    grid = small_grid()
    mat = build_material(grid, sigma0=1.0, margin=0.5, n_s=8)
    rng = np.random.default_rng(7)
    bd = grid.boundary
    g = rng.random((3, bd.n_faces) + grid.shape[1:]) * (bd.member == -1)[None, :, :, None]
    g[1:, :, :, 0] = 0.0                       # compatible data for the charged species
    gs = rng.random((3, bd.n_faces) + grid.shape[1:]) * (bd.member == 1)[None, :, :, None]
    return TransportProblem(grid, mat, f=rng.random(grid.species_shape), g=g,
                            fstar=rng.random(grid.species_shape), gstar=gs)


@pytest.fixture(scope="session")
def toy_setup():
    grid = toy_phantom()
    mat = build_material(grid, sigma0=1.0, margin=0.5, n_s=8)
    problem = TransportProblem(grid, mat)
    sp = StoppingPowers.uniform(grid, (1.0, 1.0, 1.0))
    rx = Prescription.from_grid(grid, D0=1.0, DC=0.2, DN=0.3, c_sc=10.0)
    return problem, sp, rx
