import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from csdaplan import dose_planner as dp
from csdaplan.errors import CsdaError, ShapeError, StaleStateError

finite = st.floats(-1e6, 1e6, allow_nan=False)


@given(arrays(float, st.integers(1, 20), elements=finite))
def test_positive_and_negative_parts(a):
    assert np.allclose(dp.pos_part(a) - dp.neg_part(a), a)
    assert np.all(dp.pos_part(a) >= 0) and np.all(dp.neg_part(a) >= 0)
    assert np.allclose(dp.pos_part(a) * dp.neg_part(a), 0.0)


@given(st.floats(-10, 10), st.floats(1e-3, 1.0))
def test_smooth_heaviside_is_monotone_bounded(t, eps):
    h = dp.smooth_heaviside(t, eps)
    assert 0.0 <= h <= 1.0
    assert dp.smooth_heaviside(t + 0.1, eps) >= h


def test_smooth_heaviside_limits():
    assert dp.smooth_heaviside(1.0, 1e-6) == pytest.approx(1.0)
    assert dp.smooth_heaviside(-1.0, 1e-6) == pytest.approx(0.0)
    assert dp.smooth_heaviside(0.0, 0.1) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        dp.smooth_heaviside(0.0, 0.0)


def test_dose_adjoint_duality(toy_setup):
    problem, sp, rx = toy_setup
    g = problem.grid
    rng = np.random.default_rng(0)
    s = dp.StoppingPowers(rng.random((3, g.spatial.n_active, g.energy.n)))
    psi = rng.standard_normal(g.species_shape)
    d = rng.standard_normal(g.spatial.n_active)
    lhs = g.spatial.voxel_volume * np.dot(dp.dose(psi, s, g), d)
    rhs = g.inner(psi, dp.dose_adjoint(d, s, g))
    assert lhs == pytest.approx(rhs, rel=1e-12)
    with pytest.raises(ShapeError):
        dp.dose(np.zeros(3), s, g)


def test_stopping_power_validation():
    with pytest.raises(ShapeError):
        dp.StoppingPowers(np.ones((2, 3, 4)))
    with pytest.raises(ValueError):
        dp.StoppingPowers(-np.ones((3, 3, 4)))


def test_dvh():
    D = np.array([0.0, 0.5, 1.0, 1.5])
    mask = np.array([True, True, True, False])
    assert dp.dvh_fraction(D, mask, 0.5) == pytest.approx(2 / 3)
    assert list(dp.dvh_curve(D, mask, [0.0, 2.0])) == [1.0, 0.0]
    with pytest.raises(ValueError):
        dp.dvh_fraction(D, np.zeros(4, bool), 0.1)


def test_prescription_validation(toy_setup):
    problem, _, rx = toy_setup
    assert rx.target.sum() == 8 and rx.critical.sum() == 8 and rx.normal.sum() == 16
    with pytest.raises(ValueError):
        dp.Prescription(rx.target, rx.target, rx.normal)
    with pytest.raises(ValueError):
        dp.Prescription(rx.target, rx.critical, rx.normal, v_C=2.0)
    half = rx.scaled(0.5)
    assert np.allclose(half.d_T, 0.5 * rx.d_T)


def test_state_staleness_and_mode_checks(toy_setup):
    problem, sp, rx = toy_setup
    pl = dp.Planner(problem, sp, rx, mode="external")
    st_ = pl.state(pl.random_control(np.random.default_rng(1)))
    dp.gradient_external(st_, pl)
    with pytest.raises(CsdaError):
        dp.gradient_internal(st_, pl)
    st_.control = st_.control + 1.0
    with pytest.raises(StaleStateError):
        dp.gradient_external(st_, pl)
    with pytest.raises(CsdaError):
        dp.optimize_internal(pl)
    with pytest.raises(ValueError):
        dp.Planner(problem, sp, rx, mode="sideways")


def test_objective_is_convex_along_a_line(toy_setup):
    problem, sp, rx = toy_setup
    pl = dp.Planner(problem, sp, rx, mode="internal")
    rng = np.random.default_rng(2)
    u, w = pl.random_control(rng), pl.random_control(rng, nonneg=False)
    j = [pl.J(u + t * w) for t in (-1.0, 0.0, 1.0)]
    assert j[0] + j[2] - 2 * j[1] > 0


def test_full_objective_reduces_to_initializer_without_one_sided_terms(toy_setup):
    problem, sp, rx = toy_setup
    pl = dp.Planner(problem, sp, rx, mode="external")
    st_ = pl.state(pl.random_control(np.random.default_rng(3)) * 10)
    full = dp.objective_full(st_, rx, pl)
    assert full["T"] == pytest.approx(st_.objective["T"])
    assert full["sc"] == pytest.approx(st_.objective["sc"])
    # one-sided penalties never exceed the two-sided ones
    assert full["C"] <= st_.objective["C"] + 1e-15
    assert full["N"] <= st_.objective["N"] + 1e-15


def test_linear_optimum_kkt_and_initial_point(toy_setup):
    problem, sp, rx = toy_setup
    pl = dp.Planner(problem, sp, rx, mode="external")
    lin = dp.optimize_linear_unconstrained(pl)
    assert lin.converged
    assert lin.kkt["stationarity"] <= 1e-9 * max(pl.norm(lin.control), 1.0) * rx.c_sc
    assert np.all(lin.initial_point >= 0)


def test_auto_theta_in_unit_interval(toy_setup):
    problem, sp, rx = toy_setup
    pl = dp.Planner(problem, sp, rx, mode="external")
    th = pl.auto_theta()
    assert 0 < th <= 1
