#!/usr/bin/env python3
"""Treatment planning on the three-region toy phantom: gradients, optimality, DVH."""
import numpy as np

from _common import parser, save
from csdaplan import dose_planner as dp
from csdaplan.forms import TransportProblem
from csdaplan.material import build_material
from csdaplan.phase_space import EnergyGrid, PhaseSpaceGrid, Region, SpatialGrid


def phantom(n=4, nz=2, n_energy=4):
    lab = np.full((n, n, nz), Region.NORMAL, dtype=np.uint8)
    lab[n // 2 - 1:n // 2 + 1, n // 2 - 1:n // 2 + 1, :] = Region.TARGET
    lab[n - 1, :, :] = Region.CRITICAL
    return PhaseSpaceGrid.build(SpatialGrid(np.zeros(3), np.full(3, 0.5), lab), 0,
                                EnergyGrid.uniform(1.5, 4.0, n_energy))


def main():
    p = parser(__doc__, "results/plan")
    p.add_argument("--c-sc", type=float, default=10.0)
    p.add_argument("--theta", default="0.5")
    args = p.parse_args()
    theta = args.theta if args.theta == "auto" else float(args.theta)
    grid = phantom()
    problem = TransportProblem(grid, build_material(grid, margin=0.5, n_s=8))
    sp = dp.StoppingPowers.uniform(grid)
    rx = dp.Prescription.from_grid(grid, D0=1.0, DC=0.2, DN=0.3, c_sc=args.c_sc)
    rng = np.random.default_rng(args.seed)
    print(f"unknowns: {3 * grid.size}")
    summary = []
    for mode, opt in (("external", dp.optimize_external), ("internal", dp.optimize_internal)):
        pl = dp.Planner(problem, sp, rx, mode=mode)
        st = opt(pl, theta=theta)
        vi = dp.variational_certificate(st, pl, rng)
        print(f"{mode}: {st.iterations} iterations, J = {st.objective['total']:.6g}, complementarity {st.kkt["complementarity"]:.2e}, VI min {vi:.2e}")
        save(args.out, f"{mode}_iterations.csv", ["iteration", "step", "theta", "objective"],
             [[h["iteration"], h["step"], h["theta"], h["objective"]] for h in st.history])
        levels = np.linspace(0, 1.25 * max(st.dose.max(), rx.D0), 26)
        save(args.out, f"{mode}_dvh.csv", ["dose", "target", "critical", "normal"],
             [[lv] + [dp.dvh_fraction(st.dose, m, lv) for m in (rx.target, rx.critical, rx.normal)]
              for lv in levels])
        summary.append([mode, st.iterations, st.objective["total"], st.kkt["complementarity"],
                        st.kkt["stationarity"], vi])
    pl = dp.Planner(problem, sp, rx, mode="external")
    lin = dp.optimize_linear_unconstrained(pl, theta=theta)
    ref = dp.dense_linear_optimum(pl)
    err = float(np.abs(lin.control - ref).max() / np.abs(ref).max())
    print(f"linear: {lin.iterations} iterations, relative difference to dense solve {err:.2e}")
    summary.append(["linear", lin.iterations, lin.objective["total"], 0.0, lin.kkt["stationarity"], err])
    save(args.out, "summary.csv", ["mode", "iterations", "objective", "complementarity", "stationarity",
                                   "vi_min_or_dense_error"], summary)


if __name__ == "__main__":
    main()
