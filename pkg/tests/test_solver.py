import numpy as np
import pytest

from conftest import small_grid
from csdaplan.errors import ConvergenceError, CsdaError
from csdaplan.forms import TransportProblem, assembler_for, functional_F, functional_Fstar
from csdaplan.material import build_material
from csdaplan.solver import apriori_ratio, compatibility_warning, dense_solve, solve_adjoint, solve_forward


def test_forward_and_adjoint_match_dense(small_problem):
    psi, rep = solve_forward(small_problem, tol=1e-12)
    assert rep.residual <= 1e-12
    assert rep.history == sorted(rep.history, reverse=True)
    ref = dense_solve(small_problem)
    assert np.abs(psi - ref).max() <= 1e-9 * np.abs(ref).max()
    psis, rep_a = solve_adjoint(small_problem, tol=1e-12)
    refs = dense_solve(small_problem, adjoint=True)
    assert np.abs(psis - refs).max() <= 1e-9 * np.abs(refs).max()
    assert rep_a.direction == "adjoint"


def test_duality_of_functionals(small_problem):
    g = small_problem.grid
    psi, _ = solve_forward(small_problem, tol=1e-12)
    psis, _ = solve_adjoint(small_problem, tol=1e-12)
    F = functional_F(g, small_problem.f, small_problem.g)
    Fs = functional_Fstar(g, small_problem.fstar, small_problem.gstar)
    assert F(psis) == pytest.approx(Fs(psi), rel=1e-9)


def test_zero_data_gives_zero_solution():
    grid = small_grid(dims=(1, 1, 1), n_energy=3)
    pb = TransportProblem(grid, build_material(grid, n_s=8))
    psi, rep = solve_forward(pb)
    assert np.all(psi == 0)
    assert apriori_ratio(pb, psi) == (0.0, True)


def test_nonnegative_data_gives_nonnegative_flux(small_problem):
    psi, _ = solve_forward(small_problem, tol=1e-12)
    assert psi.min() >= -1e-12


def test_apriori_ratio_bounded_by_inverse_cprime(small_problem):
    psi, _ = solve_forward(small_problem, tol=1e-12)
    ratio, zero = apriori_ratio(small_problem, psi)
    assert not zero
    assert ratio <= 1.0 / small_problem.material.c_prime


def test_compatibility_warning():
    grid = small_grid(dims=(1, 1, 1), n_energy=3)
    mat = build_material(grid, n_s=8)
    bd = grid.boundary
    g = np.zeros((3, bd.n_faces) + grid.shape[1:])
    g[1] = (bd.member == -1)[:, :, None] * 1.0
    pb = TransportProblem(grid, mat, g=g)
    assert compatibility_warning(pb)
    _, rep = solve_forward(pb)
    assert rep.warnings
    g[1, :, :, 0] = 0.0
    assert not compatibility_warning(pb.with_data(g=g))


def test_nonconvergence_raises_with_history(small_problem):
    with pytest.raises(ConvergenceError) as ei:
        solve_forward(small_problem, tol=1e-15, max_iter=1)
    assert len(ei.value.history) >= 1


def test_dense_oracle_size_limit():
    grid = small_grid(dims=(6, 6, 6), level=1, n_energy=3)
    mat = build_material(grid, n_s=4)
    with pytest.raises(CsdaError):
        dense_solve(TransportProblem(grid, mat, f=np.ones(grid.species_shape)))


def test_warm_start_converges_immediately(small_problem):
    psi, _ = solve_forward(small_problem, tol=1e-10)
    _, rep = solve_forward(small_problem, tol=1e-8, x0=psi)
    assert rep.iterations <= 1
