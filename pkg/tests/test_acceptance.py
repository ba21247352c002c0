"""Acceptance checks, one test per criterion; each prints a PASS/FAIL line."""
import time

import numpy as np
import pytest
from scipy import integrate

from conftest import small_grid, toy_phantom
from csdaplan import collision as col
from csdaplan import dose_planner as dp
from csdaplan import xsec
from csdaplan.forms import (TransportProblem, assemble_adjoint, assemble_forward, assembler_for,
                            green_terms, norm_H)
from csdaplan.hypersingular import kappa_consistency_report
from csdaplan.material import Coupling, build_material, photon_only_material, random_kernel_set
from csdaplan.phase_space import EnergyGrid, PhaseSpaceGrid, SpatialGrid
from csdaplan.solver import dense_solve, solve_adjoint, solve_forward
from csdaplan.vcoords import (VelocityGrid, VelocityProblem, equivalence_residual, from_velocity,
                              to_velocity)

RNG_SEED = 20240611


def _orders(errors):
    e = np.asarray(errors, float)
    return np.log2(e[:-1] / e[1:])


# ---------------------------------------------------------------------------
# 1. Schur bound
# ---------------------------------------------------------------------------

def test_schur_bound(report):
    grid = PhaseSpaceGrid.build(SpatialGrid.box((6, 6, 6), (0.5,) * 3), 1, EnergyGrid.uniform(1.5, 5.0, 16))
    assert grid.shape == (216, 42, 16)
    rng = np.random.default_rng(RNG_SEED)
    nv = grid.spatial.n_active
    t0 = time.perf_counter()
    worst = -np.inf
    for _ in range(20):
        moller = xsec.MollerData(rng.uniform(0.5, 1.5, nv), rng.uniform(1.5, 3.0), np.zeros((nv, 16)))
        ks = random_kernel_set(grid, rng, moller, n_s=8)
        norm = col.operator_norm(ks, grid.cell_weights, rng=rng)
        worst = max(worst, norm - ks.schur_bound)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-6 and elapsed < 60.0
    report(1, ok, f"max(norm - 2pi sqrt(M1 M2)) = {worst:.3e} over 20 sets, {elapsed:.1f} s")
    assert worst <= 1e-6
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. Coercivity
# ---------------------------------------------------------------------------

def _samples(rng, shape, n):
    """Mix of signed Gaussian and nonnegative (Perron-direction-like) samples."""
    for i in range(n):
        yield rng.standard_normal(shape) if i % 2 == 0 else rng.random(shape)


def test_coercivity(report):
    grid = small_grid()
    mat = build_material(grid, sigma0=1.0, margin=0.5, n_s=8)
    rng = np.random.default_rng(RNG_SEED + 2)
    W = np.broadcast_to(grid.cell_weights, grid.species_shape)
    Sig = mat.Sigma[:, :, None, :]
    c = mat.margin
    viol_K = 0
    worst_K = np.inf
    for psi in _samples(rng, grid.species_shape, 10_000):
        q = np.sum(W * (Sig * psi - col.apply_Kr_coupled(mat.kernels, psi)) * psi)
        nn = np.sum(W * psi * psi)
        worst_K = min(worst_K, q / nn)
        viol_K += q < (c - 1e-8) * nn
    asm = assembler_for(TransportProblem(grid, mat))
    A, G = asm.forward, asm.gram_H
    cp = mat.c_prime
    viol_B = 0
    worst_B = np.inf
    for v in _samples(rng, grid.species_shape, 10_000):
        x = v.ravel()
        b, h = x @ (A @ x), x @ (G @ x)
        worst_B = min(worst_B, b / h)
        viol_B += b < cp * h
    ok = viol_K == 0 and viol_B == 0
    report(2, ok, f"<(Sigma-K)psi,psi>/|psi|^2 min {worst_K:.4f} vs c={c:.4f} ({viol_K} violations); "
                  f"B(v,v)/|v|_H^2 min {worst_B:.4f} vs c'={cp:.4f} ({viol_B} violations)")
    assert viol_K == 0
    assert viol_B == 0


# ---------------------------------------------------------------------------
# 3. Dense-oracle equivalence
# ---------------------------------------------------------------------------

def test_dense_oracle(report):
    grid = small_grid(dims=(2, 2, 2), n_energy=5)
    n_unknowns = 3 * grid.size
    assert n_unknowns <= 2000
    mat = build_material(grid, sigma0=1.0, margin=0.5, n_s=8)
    rng = np.random.default_rng(RNG_SEED + 3)
    bd = grid.boundary
    g = rng.random((3, bd.n_faces) + grid.shape[1:]) * (bd.member == -1)[None, :, :, None]
    g[1:, :, :, 0] = 0.0
    gs = rng.random((3, bd.n_faces) + grid.shape[1:]) * (bd.member == 1)[None, :, :, None]
    pb = TransportProblem(grid, mat, f=rng.random(grid.species_shape), g=g,
                          fstar=rng.random(grid.species_shape), gstar=gs)
    psi, _ = solve_forward(pb, tol=1e-13)
    psis, _ = solve_adjoint(pb, tol=1e-13)
    ref = dense_solve(pb)
    refs = dense_solve(pb, adjoint=True)
    e_f = np.linalg.norm(psi - ref) / np.linalg.norm(ref)
    e_a = np.linalg.norm(psis - refs) / np.linalg.norm(refs)
    A = assemble_forward(pb).matrix
    As = assemble_adjoint(pb).matrix
    e_t = abs(As - A.T).max()
    ok = e_f <= 1e-8 and e_a <= 1e-8 and e_t <= 1e-12
    report(3, ok, f"{n_unknowns} unknowns: forward rel err {e_f:.2e}, adjoint rel err {e_a:.2e}, "
                  f"max|A* - A^T| {e_t:.1e}")
    assert e_f <= 1e-8 and e_a <= 1e-8 and e_t <= 1e-12


# ---------------------------------------------------------------------------
# 4. Analytic transport
# ---------------------------------------------------------------------------

def slab_errors(sizes=(16, 32, 64, 128), Sigma=1.0, L=1.0, lateral=1e8, min_cos=0.5):
    """Max error of the upwind slab solution against exp(-Sigma x / omega_x)."""
    out = []
    for nx in sizes:
        spg = SpatialGrid.box((nx, 1, 1), (L / nx, lateral, lateral))
        grid = PhaseSpaceGrid.build(spg, 0, EnergyGrid.uniform(1.5, 2.0, 2))
        mat = photon_only_material(grid, Sigma)
        bd = grid.boundary
        on_face = (bd.normal[:, 0] < -0.5)[:, None, None]
        g = np.zeros((3, bd.n_faces) + grid.shape[1:])
        g[0] = np.where(on_face & (bd.member == -1)[:, :, None], 1.0, 0.0)
        psi, _ = solve_forward(TransportProblem(grid, mat, g=g), tol=1e-13)
        om = grid.sphere.nodes
        sel = om[:, 0] > min_cos
        x = spg.centers[:, 0]
        exact = np.exp(-Sigma * x[:, None] / om[None, sel, 0])
        out.append(np.abs(psi[0][:, sel, :] - exact[:, :, None]).max())
    return out


def csda_errors(sizes=(9, 17, 33, 65), kappa=2.0, base_sigma=0.5, E0=1.5, Em=4.0):
    """Max error of the CSDA-only homogeneous electron problem against a 1-D quadrature."""
    def a(E):
        return xsec.drift(E, kappa)

    def Sig(E):
        return base_sigma + xsec.sigma_kappa_extra(E, kappa)

    def oracle(E):
        # a psi' + Sigma psi = 1 with psi(Em) = 0, integrated along the characteristic
        def decay(E1):
            return integrate.quad(lambda s: Sig(s) / -a(s), E, E1, epsabs=1e-13, epsrel=1e-13)[0]
        return integrate.quad(lambda E1: np.exp(-decay(E1)) / -a(E1), E, Em, epsabs=1e-12, epsrel=1e-12)[0]

    out = []
    for n in sizes:
        energy = EnergyGrid.uniform(E0, Em, n)
        grid = PhaseSpaceGrid.build(SpatialGrid.box((1, 1, 1), (1e8,) * 3), 0, energy)
        ks = col.CoupledKernelSet({}, grid.shape).validate()
        mat = build_material(grid, sigma0=1.0, kappa=kappa, Sigma=base_sigma, kernels=ks,
                             coupling=Coupling(0, 0, 0, 0, 0))
        f = grid.zeros()
        f[1] = 1.0
        psi, _ = solve_forward(TransportProblem(grid, mat, f=f), tol=1e-13)
        exact = np.array([oracle(E) for E in energy.levels])
        out.append(np.abs(psi[1] - exact[None, None, :]).max())
    return out


def test_analytic_transport(report):
    so = _orders(slab_errors())
    co = _orders(csda_errors())
    ok = bool(np.all((so >= 0.8) & (so <= 1.2)) and np.all((co >= 0.8) & (co <= 1.2)))
    report(4, ok, f"slab orders {np.round(so, 3).tolist()}, CSDA orders {np.round(co, 3).tolist()}")
    assert np.all((so >= 0.8) & (so <= 1.2))
    assert np.all((co >= 0.8) & (co <= 1.2))


# ---------------------------------------------------------------------------
# 5. Duality / Green
# ---------------------------------------------------------------------------

def test_duality_green(report, small_problem):
    pb = small_problem
    psi, _ = solve_forward(pb, tol=1e-12)
    psis, _ = solve_adjoint(pb, tol=1e-12)
    A = assemble_forward(pb).matrix
    As = assemble_adjoint(pb).matrix
    x, y = psi.ravel(), psis.ravel()
    gap = abs(y @ (A @ x) - x @ (As @ y))
    bound = 1e-9 * np.linalg.norm(x) * np.linalg.norm(y)
    asm = assembler_for(pb)
    lhs, boundary, endpoints = green_terms(asm, psi, psis)
    scale = abs(y @ (asm.P @ x)) + abs(x @ (asm.Pstar @ y)) + abs(boundary) + abs(endpoints)
    rel = abs(lhs - boundary - endpoints) / scale
    ok = gap <= bound and rel <= 1e-8
    report(5, ok, f"|B(psi,psi*) - B*(psi*,psi)| = {gap:.2e} (bound {bound:.2e}); Green residual rel {rel:.2e}")
    assert gap <= bound
    assert rel <= 1e-8


# ---------------------------------------------------------------------------
# 6. Adjoint gradient
# ---------------------------------------------------------------------------

def _fd_errors(planner, rng, n=20, h=1e-4):
    u = planner.random_control(rng)
    st = planner.state(u)
    grad = (dp.gradient_external if planner.mode == "external" else dp.gradient_internal)(st, planner)
    errs = []
    for _ in range(n):
        w = planner.random_control(rng, nonneg=False)
        fd = (planner.J(u + h * w) - planner.J(u - h * w)) / (2 * h)
        errs.append(abs(fd - planner.inner(grad, w)) / max(abs(fd), 1e-300))
    return max(errs)


def test_adjoint_gradient(report, toy_setup):
    problem, sp, rx = toy_setup
    rng = np.random.default_rng(RNG_SEED + 6)
    e_ext = _fd_errors(dp.Planner(problem, sp, rx, mode="external"), rng)
    e_int = _fd_errors(dp.Planner(problem, sp, rx, mode="internal"), rng)
    ok = e_ext <= 1e-4 and e_int <= 1e-4
    report(6, ok, f"max relative FD error over 20 directions: external {e_ext:.2e}, internal {e_int:.2e}")
    assert e_ext <= 1e-4 and e_int <= 1e-4


# ---------------------------------------------------------------------------
# 7. Optimality
# ---------------------------------------------------------------------------

def test_optimality(report, toy_setup):
    problem, sp, rx = toy_setup
    assert 3 * problem.grid.size <= 100_000
    rng = np.random.default_rng(RNG_SEED + 7)
    parts = []
    ok = True
    for mode, opt in (("external", dp.optimize_external), ("internal", dp.optimize_internal)):
        planner = dp.Planner(problem, sp, rx, mode=mode)
        st = opt(planner, max_iter=200)
        vi = dp.variational_certificate(st, planner, rng, n=100)
        k = st.kkt
        good = (st.converged and st.iterations <= 200 and k["complementarity"] <= 1e-8
                and float(st.control.min()) >= 0.0 and vi >= -1e-10)
        ok &= good
        parts.append(f"{mode}: {st.iterations} it, compl {k['complementarity']:.1e}, "
                     f"min u {float(st.control.min()):.1e}, VI min {vi:.1e}")
    planner = dp.Planner(problem, sp, rx, mode="external")
    lin = dp.optimize_linear_unconstrained(planner)
    ref = dp.dense_linear_optimum(planner)
    e_lin = np.abs(lin.control - ref).max() / np.abs(ref).max()
    ok &= e_lin <= 1e-8
    parts.append(f"linear vs dense {e_lin:.1e}")
    report(7, ok, "; ".join(parts))
    assert ok


# ---------------------------------------------------------------------------
# 8. kappa consistency
# ---------------------------------------------------------------------------

def test_kappa_consistency(report):
    rows = kappa_consistency_report(lambda p, E: np.full(len(p), E * E), [2.0, 1.5, 1.25, 1.125],
                                    [2.0, 3.0, 4.0, 5.0])
    d = [r["discrepancy"] for r in rows]
    ok = all(b < a for a, b in zip(d, d[1:]))
    report(8, ok, "discrepancies " + ", ".join(f"{r['kappa']}: {r['discrepancy']:.4g}" for r in rows))
    assert ok


# ---------------------------------------------------------------------------
# 9. Velocity coordinates
# ---------------------------------------------------------------------------

def _psi_manufactured(x, om, E):
    return (1 + 0.3 * x[0] - 0.2 * x[2]) * (om[:, 0] + 2 * om[:, 1] * om[:, 2] + om[:, 2] ** 2) * E ** 1.5


def test_velocity_equivalence(report):
    vp = VelocityProblem(lambda E: -0.5 * np.log(E) - 1.0, lambda E: -0.1 * np.ones_like(E),
                         lambda E: 0.7 + 0.0 * E, np.array([0.1, 0.2, 0.3]))
    res = []
    for level, h in ((1, 0.04), (2, 0.02), (3, 0.01), (4, 0.005)):
        vg = VelocityGrid.build(level, 2.0, 5.0, 4, np.random.default_rng(1))
        res.append(equivalence_residual(_psi_manufactured, vp, vg, h))
    orders = _orders(res)
    rng = np.random.default_rng(RNG_SEED + 9)
    w = rng.standard_normal((1000, 3))
    w /= np.linalg.norm(w, axis=1)[:, None]
    E = rng.uniform(1.5, 6.0, 1000)
    om, E2 = from_velocity(to_velocity(w, E))
    rt = max(np.abs(om - w).max(), np.abs(E2 - E).max() / E.max())
    ok = bool(np.all(np.diff(res) < 0) and np.all(orders >= 0.8) and rt <= 1e-14)
    report(9, ok, f"residuals {', '.join(f'{r:.3g}' for r in res)}; orders {np.round(orders, 2).tolist()}; "
                  f"round trip {rt:.1e}")
    assert np.all(np.diff(res) < 0)
    assert np.all(orders >= 0.8)
    assert rt <= 1e-14


# ---------------------------------------------------------------------------
# 10. Closed-form spot values
# ---------------------------------------------------------------------------

def _one_sided(f, E, h):
    return (-3.0 * f(E) + 4.0 * f(E + h) - f(E + 2 * h)) / (2 * h)


@pytest.mark.parametrize("sigma0", [0.7, 1.0])
def test_spot_values(report, sigma0):
    E = np.array([1.2, 2.0, 3.5, 7.0])
    h = 1e-5
    mu_diag = xsec.mu(E, E)
    # mu and sigma2 are only defined for E' >= E: second-order one-sided differences
    fd_mu = _one_sided(lambda Ep: xsec.mu(Ep, E), E, h)
    dmu = -1.0 / (E * (E + 2.0))
    fd_s2 = _one_sided(lambda Ep: xsec.sigma_hat(2, Ep, E, sigma0), E, h)
    ds2 = -2.0 * sigma0 * (E + 1.0) / (E ** 2 * (E + 2.0) ** 2)
    e1 = np.abs(mu_diag - 1.0).max()
    e2 = max(np.abs(fd_mu - dmu).max(), np.abs(xsec.dmu_dEp_diag(E) - dmu).max())
    e3 = max(np.abs(fd_s2 - ds2).max(), np.abs(xsec.dsigma2_dEp(E, sigma0) - ds2).max())
    ok = e1 <= 1e-12 and e2 <= 1e-6 and e3 <= 1e-6
    report(10, ok, f"sigma0={sigma0}: |mu(E,E)-1| {e1:.1e}, dmu err {e2:.1e}, dsigma2 err {e3:.1e}")
    assert e1 <= 1e-12 and e2 <= 1e-6 and e3 <= 1e-6
