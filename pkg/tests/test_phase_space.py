import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csdaplan.errors import DomainError, ShapeError
from csdaplan.phase_space import (EnergyGrid, PhaseSpaceGrid, Region, SpatialGrid, build_sphere_grid,
                                  escape_time, integrate_phase, random_rotation)


@pytest.mark.parametrize("level", [0, 1, 2])
def test_sphere_node_count_and_area(level):
    s = build_sphere_grid(level)
    assert s.n == 10 * 4 ** level + 2
    assert np.allclose(np.linalg.norm(s.nodes, axis=1), 1.0)
    assert s.weights.sum() == pytest.approx(4 * np.pi, rel=1e-12)
    assert np.all(s.weights > 0)


def test_sphere_quadrature_second_moments():
    s = build_sphere_grid(3)
    # int omega_i omega_j = 4 pi / 3 delta_ij
    M = np.einsum("d,di,dj->ij", s.weights, s.nodes, s.nodes)
    assert np.allclose(M, 4 * np.pi / 3 * np.eye(3), atol=2e-2)


def test_laplacian_annihilates_constants_and_is_symmetric():
    s = build_sphere_grid(2)
    L = s.lb_matrix
    assert np.abs(L @ np.ones(s.n)).max() < 1e-12
    assert abs(L - L.T).max() < 1e-14
    u = np.random.default_rng(0).standard_normal(s.n)
    assert u @ (L @ u) <= 1e-12
    assert u @ (L @ u) == pytest.approx(-s.dirichlet(u), rel=1e-12)


def test_laplacian_first_harmonic_eigenvalue():
    s = build_sphere_grid(4)
    z = s.nodes[:, 2]
    lap = s.laplacian(z)
    # Delta_S omega_3 = -2 omega_3
    ratio = s.integrate(lap * z) / s.integrate(z * z)
    assert ratio == pytest.approx(-2.0, rel=2e-2)


def test_interpolation_reproduces_nodes_and_partitions_unity():
    s = build_sphere_grid(1)
    M = s.interpolation_matrix(s.nodes)
    assert np.allclose(M.toarray(), np.eye(s.n), atol=1e-12)
    pts = np.random.default_rng(1).standard_normal((50, 3))
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    P = s.interpolation_matrix(pts)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)
    assert P.data.min() >= 0


def test_random_rotation_is_proper():
    R = random_rotation(np.random.default_rng(3))
    assert np.allclose(R @ R.T, np.eye(3))
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_energy_grid_orientation_and_weights():
    e = EnergyGrid.uniform(1.5, 4.0, 6)
    assert e.Em == 4.0 and e.E0 == 1.5
    assert e.weights.sum() == pytest.approx(e.length)
    with pytest.raises(DomainError):
        EnergyGrid(np.array([1.0, 2.0]))
    with pytest.raises(DomainError):
        EnergyGrid(np.array([2.0]))


@given(st.integers(2, 12), st.floats(0.1, 3.0), st.floats(0.2, 5.0))
def test_energy_trapezoid_integrates_linears(n, E0, width):
    e = EnergyGrid.uniform(E0, E0 + width, n)
    assert np.dot(e.weights, 2 * e.levels + 1) == pytest.approx((E0 + width) ** 2 - E0 ** 2 + width)


def test_spatial_grid_validation():
    with pytest.raises(DomainError):
        SpatialGrid.box((2, 2, 2), (1.0, -1.0, 1.0))
    with pytest.raises(DomainError):
        SpatialGrid(np.zeros(3), np.ones(3), np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ShapeError):
        SpatialGrid(np.zeros(3), np.ones(3), np.ones((2, 2), np.uint8))


def test_outside_voxels_are_excluded():
    lab = np.full((3, 3, 1), Region.NORMAL, np.uint8)
    lab[1, 1, 0] = Region.OUTSIDE
    g = SpatialGrid(np.zeros(3), np.ones(3), lab)
    assert g.n_active == 8
    # a hole in the middle contributes boundary faces
    vox, normal, area, cent = g.boundary_faces
    assert len(vox) == 8 * 2 + 12 + 4


@settings(max_examples=40, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.05, 0.95),
       st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
def test_escape_time_box_matches_slab_formula(x, y, z, a, b, c):
    d = np.array([a, b, c])
    if np.linalg.norm(d) < 1e-3:
        d = np.array([1.0, 0.0, 0.0])
    om = d / np.linalg.norm(d)
    g = SpatialGrid.box((4, 4, 4), (0.25, 0.25, 0.25))
    p = np.array([x, y, z])
    t = escape_time(g, p, om)
    with np.errstate(divide="ignore", over="ignore"):
        ts = np.where(om > 0, p / om, np.where(om < 0, (p - 1.0) / om, np.inf))
    assert t == pytest.approx(ts.min(), rel=1e-9, abs=1e-12)


def test_boundary_split_and_t2_measure():
    spg = SpatialGrid.box((1, 1, 1))
    grid = PhaseSpaceGrid.build(spg, 2, EnergyGrid.uniform(1.5, 2.5, 3))
    bd = grid.boundary
    # every face sees each direction either entering or leaving (or grazing)
    assert set(np.unique(bd.member)) <= {-1, 0, 1}
    one = np.ones(bd.weight.shape)
    total = bd.inner(one, one, "all")
    # int_S |omega . nu| = 2 pi for each of the 6 unit faces, times |I|
    assert total == pytest.approx(12 * np.pi * grid.energy.length, rel=2e-2)
    assert bd.inner(one, one, "-") == pytest.approx(bd.inner(one, one, "+"), rel=1e-12)


def test_phase_space_inner_and_shapes():
    grid = PhaseSpaceGrid.build(SpatialGrid.box((2, 1, 1), (0.5, 1, 1)), 0, EnergyGrid.uniform(1, 3, 3))
    one = np.ones(grid.shape)
    assert integrate_phase(grid, one) == pytest.approx(2 * 0.5 * 4 * np.pi * 2.0)
    with pytest.raises(ShapeError):
        grid.inner(np.ones((2, 2)), np.ones((2, 2)))
    assert grid.zeros().shape == grid.species_shape
