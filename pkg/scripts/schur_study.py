#!/usr/bin/env python3
"""Power-iteration norm of random coupled kernel sets against 2 pi sqrt(M1 M2)."""
import time

import numpy as np

from _common import parser, save
from csdaplan import collision as col
from csdaplan.material import random_kernel_set
from csdaplan.phase_space import EnergyGrid, PhaseSpaceGrid, SpatialGrid
from csdaplan.xsec import MollerData


def main():
    p = parser(__doc__, "results/schur")
    p.add_argument("--sets", type=int, default=20)
    p.add_argument("--level", type=int, default=1)
    p.add_argument("--n-energy", type=int, default=16)
    args = p.parse_args()
    grid = PhaseSpaceGrid.build(SpatialGrid.box((6, 6, 6), (0.5,) * 3), args.level,
                                EnergyGrid.uniform(1.5, 5.0, args.n_energy))
    rng = np.random.default_rng(args.seed)
    nv, nE = grid.spatial.n_active, grid.energy.n
    rows = []
    t0 = time.perf_counter()
    for i in range(args.sets):
        ks = random_kernel_set(grid, rng, MollerData(rng.uniform(0.5, 1.5, nv), rng.uniform(1.5, 3.0),
                                                     np.zeros((nv, nE))), n_s=8)
        norm = col.operator_norm(ks, grid.cell_weights, rng=rng)
        rows.append([i, len(ks.entries), ks.M1, ks.M2, ks.schur_bound, norm, norm / ks.schur_bound])
        print(f"set {i:2d}: norm {norm:.6f}  bound {ks.schur_bound:.6f}  ratio {norm / ks.schur_bound:.3f}")
    print(f"total {time.perf_counter() - t0:.1f} s")
    save(args.out, "schur.csv", ["set", "n_kernels", "M1", "M2", "schur_bound", "norm", "ratio"], rows)


if __name__ == "__main__":
    main()
