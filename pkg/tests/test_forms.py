import numpy as np
import pytest
import scipy.linalg as sla

from conftest import small_grid
from csdaplan.errors import CsdaError, ShapeError
from csdaplan.forms import (Assembler, TransportProblem, assemble_adjoint, assemble_forward, assembler_for,
                            boundedness_constant, functional_F, functional_Fstar, green_residual,
                            green_residual_exact, green_terms, norm_H, norm_Hhat)
from csdaplan.material import build_material, photon_only_material


@pytest.fixture(scope="module")
def asm():
    grid = small_grid(dims=(2, 2, 1), n_energy=4)
    return Assembler(grid, build_material(grid, margin=0.5, n_s=8))


def test_adjoint_matrix_is_transpose(asm):
    assert abs(asm.adjoint - asm.forward.T).max() < 1e-12


def test_green_identity_random_fields(asm):
    rng = np.random.default_rng(2)
    for _ in range(5):
        psi = rng.standard_normal(asm.grid.species_shape)
        ps = rng.standard_normal(asm.grid.species_shape)
        lhs, boundary, endpoints = green_terms(asm, psi, ps)
        assert green_residual(asm, psi, ps) <= 1e-11 * (abs(lhs) + abs(boundary) + abs(endpoints))


def test_green_terms_shape_check(asm):
    with pytest.raises(ShapeError):
        green_terms(asm, np.zeros(3), np.zeros(3))


def test_exact_coercivity_constant(asm):
    """Smallest generalized eigenvalue of (A + A^T)/2 against the H Gram matrix."""
    H = 0.5 * (asm.forward + asm.forward.T).toarray()
    G = asm.gram_H.toarray()
    lam = sla.eigh(H, G, eigvals_only=True)[0]
    assert lam >= asm.material.c_prime - 1e-10


def test_boundedness_constant_finite(asm):
    M = boundedness_constant(asm)
    assert np.isfinite(M) and M > 0
    rng = np.random.default_rng(4)
    for _ in range(10):
        u = rng.standard_normal(asm.grid.species_shape)
        v = rng.standard_normal(asm.grid.species_shape)
        b = abs(v.ravel() @ (asm.forward @ u.ravel()))
        assert b <= M * norm_H(asm, u) * norm_Hhat(asm, v) * (1 + 1e-10)


def test_norm_ordering(asm):
    u = np.random.default_rng(8).standard_normal(asm.grid.species_shape)
    assert norm_Hhat(asm, u) >= norm_H(asm, u) >= asm.grid.norm(u) - 1e-12


def test_loads_match_functionals():
    grid = small_grid(dims=(2, 1, 1), n_energy=3)
    mat = build_material(grid, n_s=8)
    rng = np.random.default_rng(3)
    bd = grid.boundary
    f = rng.random(grid.species_shape)
    g = rng.random((3, bd.n_faces) + grid.shape[1:])
    pb = TransportProblem(grid, mat, f=f, g=g, fstar=f, gstar=g)
    v = rng.standard_normal(grid.species_shape)
    assert assemble_forward(pb).rhs @ v.ravel() == pytest.approx(functional_F(grid, f, g)(v))
    assert assemble_adjoint(pb).rhs @ v.ravel() == pytest.approx(functional_Fstar(grid, f, g)(v))


def test_problem_validation_and_cache_reuse():
    grid = small_grid(dims=(1, 1, 1), n_energy=3)
    mat = build_material(grid, n_s=8)
    pb = TransportProblem(grid, mat)
    asm = assembler_for(pb)
    pb2 = pb.with_data(f=np.ones(grid.species_shape))
    assert assembler_for(pb2) is asm
    with pytest.raises(ShapeError):
        TransportProblem(grid, mat, f=np.ones(4))
    with pytest.raises(CsdaError):
        assemble_forward(TransportProblem(grid, mat, validated=False))


def test_green_exact_for_smooth_photon_fields():
    """Quadrature Green residual of analytic fields shrinks under refinement."""
    res = []
    for n in (2, 4):
        grid = small_grid(dims=(n, n, n), spacing=1.0 / n, level=2, n_energy=3)
        om0 = np.array([0.2, 0.3, 0.4])

        def psi(x, om, E):
            return (1 + x @ om0)[:, None, None] * (1 + om[:, 2])[None, :, None] * np.ones_like(E)[None, None, :]

        def psis(x, om, E):
            return np.exp(x[:, :1])[:, :, None] * np.ones((1, len(om), len(E)))

        def P(x, om, E):         # omega . grad psi
            return (om @ om0)[None, :, None] * (1 + om[:, 2])[None, :, None] * np.ones((len(x), 1, len(E)))

        def Ps(x, om, E):        # -omega . grad psi*
            return -np.exp(x[:, :1])[:, :, None] * om[None, :, 0:1] * np.ones((1, 1, len(E)))

        res.append(green_residual_exact(grid, psi, psis, P, Ps, lambda E: 0.0))
    assert res[1] < res[0]


def test_photon_only_material_margin():
    grid = small_grid(dims=(1, 1, 1), n_energy=3)
    m = photon_only_material(grid, 2.0)
    assert m.margin == pytest.approx(2.0)
