#!/usr/bin/env python3
"""First-order convergence: pure-absorber slab (space) and CSDA-only problem (energy)."""
import numpy as np
from scipy import integrate

from _common import parser, save
from csdaplan import xsec
from csdaplan.collision import CoupledKernelSet
from csdaplan.forms import TransportProblem
from csdaplan.material import Coupling, build_material, photon_only_material
from csdaplan.phase_space import EnergyGrid, PhaseSpaceGrid, SpatialGrid
from csdaplan.solver import solve_forward


def slab(nx, Sigma=1.0, L=1.0, lateral=1e8, min_cos=0.5):
    spg = SpatialGrid.box((nx, 1, 1), (L / nx, lateral, lateral))
    grid = PhaseSpaceGrid.build(spg, 0, EnergyGrid.uniform(1.5, 2.0, 2))
    bd = grid.boundary
    g = np.zeros((3, bd.n_faces) + grid.shape[1:])
    g[0] = ((bd.normal[:, 0] < -0.5)[:, None] & (bd.member == -1))[:, :, None] * 1.0
    psi, _ = solve_forward(TransportProblem(grid, photon_only_material(grid, Sigma), g=g), tol=1e-13)
    om = grid.sphere.nodes
    sel = om[:, 0] > min_cos
    exact = np.exp(-Sigma * spg.centers[:, :1] / om[None, sel, 0])
    return float(np.abs(psi[0][:, sel, :] - exact[:, :, None]).max())


def csda(n, kappa=2.0, base=0.5, E0=1.5, Em=4.0):
    def a(E):
        return xsec.drift(E, kappa)

    def Sig(E):
        return base + xsec.sigma_kappa_extra(E, kappa)

    def oracle(E):
        def decay(E1):
            return integrate.quad(lambda s: Sig(s) / -a(s), E, E1, epsabs=1e-13, epsrel=1e-13)[0]
        return integrate.quad(lambda E1: np.exp(-decay(E1)) / -a(E1), E, Em, epsabs=1e-12, epsrel=1e-12)[0]

    energy = EnergyGrid.uniform(E0, Em, n)
    grid = PhaseSpaceGrid.build(SpatialGrid.box((1, 1, 1), (1e8,) * 3), 0, energy)
    mat = build_material(grid, kappa=kappa, Sigma=base, kernels=CoupledKernelSet({}, grid.shape).validate(),
                         coupling=Coupling(0, 0, 0, 0, 0))
    f = grid.zeros()
    f[1] = 1.0
    psi, _ = solve_forward(TransportProblem(grid, mat, f=f), tol=1e-13)
    exact = np.array([oracle(E) for E in energy.levels])
    return float(np.abs(psi[1] - exact[None, None, :]).max())


def table(label, sizes, errs):
    rows = []
    for i, (n, e) in enumerate(zip(sizes, errs)):
        order = np.log2(errs[i - 1] / e) if i else float("nan")
        rows.append([label, n, e, order])
        print(f"{label:5s} n={n:4d} error {e:.4e} order {order:.3f}")
    return rows


def main():
    args = parser(__doc__, "results/convergence").parse_args()
    sizes = [16, 32, 64, 128, 256]
    rows = table("slab", sizes, [slab(n) for n in sizes])
    levels = [9, 17, 33, 65, 129]
    rows += table("csda", levels, [csda(n) for n in levels])
    save(args.out, "convergence.csv", ["study", "n", "max_error", "order"], rows)


if __name__ == "__main__":
    main()
