#!/usr/bin/env python3
"""Velocity-coordinate operator equivalence under refinement, round trips and Jacobian."""
import numpy as np

from _common import parser, save
from csdaplan.vcoords import (VelocityGrid, VelocityProblem, apply_P, equivalence_residual, from_velocity,
                              jacobian_check, radial_derivative, to_velocity)


def psi(x, om, E):
    return (1 + 0.3 * x[0] - 0.2 * x[2]) * (om[:, 0] + 2 * om[:, 1] * om[:, 2] + om[:, 2] ** 2) * E ** 1.5


def main():
    args = parser(__doc__, "results/velocity").parse_args()
    rng = np.random.default_rng(args.seed)
    vp = VelocityProblem(lambda E: -0.5 * np.log(E) - 1.0, lambda E: -0.1 * np.ones_like(E),
                         lambda E: 0.7 + 0.0 * E, np.array([0.1, 0.2, 0.3]))
    rows, prev = [], None
    for level, h in ((1, 0.04), (2, 0.02), (3, 0.01), (4, 0.005), (5, 0.0025)):
        r = equivalence_residual(psi, vp, VelocityGrid.build(level, 2.0, 5.0, 4, np.random.default_rng(1)), h)
        order = np.log2(prev / r) if prev else float("nan")
        rows.append([level, h, r, order])
        print(f"level {level} h={h:<7} residual {r:.4e} order {order:.3f}")
        prev = r
    save(args.out, "equivalence.csv", ["sphere_level", "energy_step", "residual", "order"], rows)
    w = rng.standard_normal((10_000, 3))
    w /= np.linalg.norm(w, axis=1)[:, None]
    E = rng.uniform(1.5, 6.0, len(w))
    om, E2 = from_velocity(to_velocity(w, E))
    print(f"round trip: direction {np.abs(om - w).max():.2e}, energy {np.abs(E2 - E).max():.2e}")
    lhs, rhs = jacobian_check(lambda o, e: (1 + o[:, 2] ** 2) * np.exp(-e / 3), 2.0, 5.0)
    print(f"Jacobian: (omega, E) quadrature {lhs:.12f}, velocity quadrature {rhs:.12f}")
    v = rng.uniform(0.5, 2.0, (200, 3))
    P = apply_P(lambda z: np.sum(z * z, axis=1), v)
    rad = radial_derivative(lambda z: np.sum(z * z, axis=1), v)
    print(f"radial field |v|^2: max |P Psi - 2 v.grad Psi| = {np.abs(P - 2 * rad).max():.2e}, "
          f"min |P Psi| = {np.abs(P).min():.3f}")


if __name__ == "__main__":
    main()
