import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csdaplan import vcoords as vc
from csdaplan.errors import DomainError

unit = st.tuples(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1)).filter(
    lambda t: 0.1 < np.linalg.norm(t))


@settings(max_examples=60)
@given(unit, st.floats(1.1, 40.0))
def test_round_trip(w, E):
    om = np.array(w) / np.linalg.norm(w)
    om2, E2 = vc.from_velocity(vc.to_velocity(om, E))
    assert np.abs(om2 - om).max() <= 1e-14
    assert abs(E2 - E) <= 1e-14 * E


def test_domain_checks():
    with pytest.raises(DomainError):
        vc.to_velocity(np.array([0, 0, 1.0]), 1.0, E0=1.0, Em=2.0)
    with pytest.raises(DomainError):
        vc.from_velocity(np.zeros(3))
    with pytest.raises(DomainError):
        vc.P_coefficients(np.array([[0.0, 0.0, 1.0]]))


def test_seam_and_inflow():
    assert vc.on_seam(np.array([1.0, 0.0, 0.3]))
    assert not vc.on_seam(np.array([-1.0, 0.0, 0.3]))
    assert vc.inflow_tilde(np.array([1.0, 0, 0]), np.array([-1.0, 0, 0]))


def test_velocity_grid_avoids_seam_and_integrates_shell():
    vg = vc.VelocityGrid.build(2, 2.0, 5.0, 6, np.random.default_rng(0))
    assert not np.any(vc.on_seam(vg.nodes))
    shell = 4 * np.pi / 3 * (5.0 ** 1.5 - 2.0 ** 1.5)
    assert vg.weights.sum() == pytest.approx(shell, rel=1e-10)


def test_P_on_direction_function_is_laplace_beltrami():
    rng = np.random.default_rng(1)
    v = rng.uniform(-2, 2, (40, 3))
    v = v[v[:, 0] ** 2 + v[:, 1] ** 2 > 0.1]
    Psi = lambda w: w[:, 2] / np.linalg.norm(w, axis=1)
    # Laplace-Beltrami of omega_3 is -2 omega_3; Psi is 0-homogeneous so v.grad Psi = 0
    lb = vc.apply_P(Psi, v, 1e-4) - 2 * vc.radial_derivative(Psi, v)
    assert np.allclose(lb, -2 * Psi(v), atol=1e-5)


def test_P_on_radial_function_is_not_zero():
    v = np.random.default_rng(2).uniform(0.5, 2, (20, 3))
    Psi = lambda w: np.sum(w * w, axis=1)
    # radial fields: P Psi = 2 v.grad Psi (so the Laplace-Beltrami part vanishes)
    assert np.allclose(vc.apply_P(Psi, v), 2 * vc.radial_derivative(Psi, v), atol=1e-5)
    assert np.all(np.abs(vc.apply_P(Psi, v)) > 1.0)


def test_P_terms_sum():
    v = np.array([[0.3, 0.4, 1.1], [1.0, -0.5, 0.2]])
    Psi = lambda w: w[:, 0] * w[:, 1] + w[:, 2] ** 3
    assert np.allclose(vc.apply_P_terms(Psi, v).sum(axis=1), vc.apply_P(Psi, v))


def test_jacobian_change_of_variables():
    lhs, rhs = vc.jacobian_check(lambda om, E: (1 + om[:, 2] ** 2) * np.exp(-E / 3), 2.0, 5.0)
    assert lhs == pytest.approx(rhs, rel=1e-10)


def test_equivalence_residual_decreases():
    psi = lambda x, om, E: (1 + 0.3 * x[0]) * (om[:, 0] + om[:, 2] ** 2) * E
    vp = vc.VelocityProblem(lambda E: -np.log(E) - 1.0, lambda E: -0.1 * np.ones_like(E),
                            lambda E: 0.5 + 0 * E)
    r = [vc.equivalence_residual(psi, vp, vc.VelocityGrid.build(l, 2.0, 5.0, 3, np.random.default_rng(3)), h)
         for l, h in ((1, 0.04), (2, 0.02), (3, 0.01))]
    assert r[0] > r[1] > r[2]


def test_sigma_tilde_kernels():
    vp = np.array([[0.0, 0.0, 2.0]])
    v = np.array([[0.0, 1.5, 0.0]])
    s1 = lambda wp, w, Ep, E: np.ones(len(np.atleast_2d(wp)))
    assert vc.sigma1_tilde(s1, vp, v) == pytest.approx(1.0)
    s2 = lambda wp, w, E: np.ones(len(np.atleast_2d(wp)))
    assert vc.sigma2_tilde(s2, vp, v, 2.0) == pytest.approx(0.5)
    assert vc.sigma3_tilde(lambda Ep, E: Ep, vp, v) == pytest.approx(4.0 / (2 * np.pi * 2.0))


def test_gamma_tilde_radius_and_cosine():
    vp = np.array([0.0, 0.0, 2.0])
    v = np.array([0.0, 0.0, 1.5])
    p = vc.gamma_tilde(vp, v, 0.7)
    assert np.linalg.norm(p) == pytest.approx(2.0)


def test_transform_coefficients_matches_functions():
    from csdaplan.phase_space import EnergyGrid
    from csdaplan.xsec import coefficients_from_functions
    energy = EnergyGrid.uniform(2.0, 5.0, 31)
    a = lambda E: -np.log(E) - 1
    b = lambda E: -0.1 * E
    S = lambda E: 0.5 + 0.0 * E
    cf = coefficients_from_functions(energy, 1, a, b, S)
    cf = cf.with_sigma(np.tile(S(energy.levels), (1, 1)))
    v = np.array([[0.0, 1.8, 0.5], [1.2, 1.0, 0.4]])
    at, bt, st_ = vc.transform_functions(a, b, S)
    got = vc.transform_coefficients(cf, energy, v)
    assert np.allclose(got[0], at(v), rtol=1e-3)
    assert np.allclose(got[1], bt(v), rtol=1e-3)
    assert np.allclose(got[2], st_(v))
