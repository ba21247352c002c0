"""Velocity coordinates v = sqrt(E) omega for the charged-particle operator.

The map h(omega, E) = sqrt(E) omega takes (S minus a seam half-plane) x I
diffeomorphically onto the spherical shell r0 < |v| < rm (r0 = sqrt(E0),
rm = sqrt(Em)).  In these coordinates

    T Psi = b~ P Psi + (a~ - 2 b~) v.grad_v Psi + |v|^{-1} v.grad_x Psi + Sigma~ Psi - K~ Psi,

with a~ = a(|v|^2) / (2|v|^2), b~ = b(|v|^2) and P the second-order operator
below.  Here P = |v|^2 Lap_v - sum_ij v_i v_j d_ij, so that the
Laplace-Beltrami operator of the direction is P - 2 v.grad_v.

This module exists to check the transformation against the (omega, E)
discretisation; the solver itself works in (omega, E).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .collision import curve_point
from .errors import DomainError
from .phase_space import SphereGrid, build_sphere_grid, random_rotation

TWO_PI = 2.0 * np.pi
AXIS_TOL = 1e-10          # chart singularity: v1^2 + v2^2 below this is rejected
SEAM_MARGIN = 1e-5


def to_velocity(omega, E, E0=None, Em=None):
    """v = sqrt(E) omega (vectorised over leading axes)."""
    omega = np.asarray(omega, float)
    E = np.asarray(E, float)
    if E0 is not None and np.any(E <= E0) or Em is not None and np.any(E >= Em):
        raise DomainError("energy outside the open interval (E0, Em)")
    if np.any(E <= 0):
        raise DomainError("energy must be positive")
    return np.sqrt(E)[..., None] * omega


def from_velocity(v, r0=None, rm=None):
    """Inverse map v -> (v/|v|, |v|^2)."""
    v = np.asarray(v, float)
    r = np.linalg.norm(v, axis=-1)
    if np.any(r == 0) or (r0 is not None and np.any(r <= r0)) or (rm is not None and np.any(r >= rm)):
        raise DomainError("velocity outside the shell r0 < |v| < rm")
    return v / r[..., None], r * r


def on_seam(v, margin=SEAM_MARGIN):
    """Points within ``margin`` of the half-plane {v2 = 0, v1 >= 0}."""
    v = np.asarray(v, float)
    return (np.abs(v[..., 1]) < margin) & (v[..., 0] >= -margin)


def inflow_tilde(v, normal):
    """Membership of (y, v) in the transformed inflow set: v . nu < 0."""
    return np.asarray(v, float) @ np.asarray(normal, float) < 0


# ---------------------------------------------------------------------------
# grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VelocityGrid:
    """Radial Gauss-Legendre shells times a rotated sphere mesh.

    ``weights`` integrate over the shell in dv (r^2 dr domega).
    """

    sphere: SphereGrid
    radii: np.ndarray
    radial_weights: np.ndarray
    r0: float
    rm: float

    @classmethod
    def build(cls, level, E0, Em, n_shells, rng=None, margin=SEAM_MARGIN, max_tries=100):
        if not 0 < E0 < Em:
            raise DomainError("need 0 < E0 < Em")
        rng = np.random.default_rng(0) if rng is None else rng
        r0, rm = np.sqrt(E0), np.sqrt(Em)
        x, w = np.polynomial.legendre.leggauss(n_shells)
        radii = 0.5 * (rm - r0) * x + 0.5 * (rm + r0)
        rw = 0.5 * (rm - r0) * w
        for _ in range(max_tries):
            sph = build_sphere_grid(level, random_rotation(rng))
            n = sph.nodes
            if not np.any(on_seam(n, margin)) and np.all(n[:, 0] ** 2 + n[:, 1] ** 2 > margin):
                return cls(sph, radii, rw, r0, rm)
        raise DomainError("could not place the sphere mesh away from the seam")

    @property
    def n(self):
        return self.radii.size * self.sphere.n

    @property
    def nodes(self):
        """(n_shells * n_dir, 3), shell-major."""
        return (self.radii[:, None, None] * self.sphere.nodes[None, :, :]).reshape(-1, 3)

    @property
    def energies(self):
        return self.radii ** 2

    @property
    def weights(self):
        return ((self.radii ** 2 * self.radial_weights)[:, None] * self.sphere.weights[None, :]).ravel()


# ---------------------------------------------------------------------------
# coefficients and kernels
# ---------------------------------------------------------------------------

def transform_functions(a, b, Sigma):
    """Velocity-space coefficient callables (a~, b~, Sigma~) from callables of E."""
    def at(v):
        r2 = np.sum(np.asarray(v, float) ** 2, axis=-1)
        return a(r2) / (2.0 * r2)

    def bt(v):
        return b(np.sum(np.asarray(v, float) ** 2, axis=-1))

    def st(v):
        return Sigma(np.sum(np.asarray(v, float) ** 2, axis=-1))
    return at, bt, st


def transform_coefficients(coeff, energy, v, voxel=0):
    """Tabulated coefficients (a~, b~, Sigma~) at velocities ``v``.

    The CoefficientField is interpolated linearly in E between its levels.
    """
    lv = energy.levels[::-1]
    r2 = np.sum(np.asarray(v, float) ** 2, axis=-1)
    if np.any(r2 < lv[0] - 1e-12) or np.any(r2 > lv[-1] + 1e-12):
        raise DomainError("|v|^2 outside the energy interval")
    a = np.interp(r2, lv, coeff.a[voxel][::-1])
    b = np.interp(r2, lv, coeff.b[voxel][::-1])
    S = np.interp(r2, lv, coeff.Sigma_kappa[voxel][::-1])
    return a / (2.0 * r2), b, S


def sigma1_tilde(sigma1, vp, v):
    """2/|v'| sigma1(v'/|v'|, v/|v|, |v'|^2, |v|^2)."""
    (wp, Ep), (w, E) = from_velocity(vp), from_velocity(v)
    return 2.0 / np.sqrt(Ep) * sigma1(wp, w, Ep, E)


def sigma2_tilde(sigma2, vp, v, interval_length):
    """(2/|I'|) (1/|v'|) sigma2(v'/|v'|, v/|v|, |v|^2), implemented as printed.

    The factor 1/|I'| turns the dv' integral into an energy average, so the
    transformed energy-local operator agrees with the original one only for
    fields that do not depend on E'.
    """
    (wp, Ep), (w, E) = from_velocity(vp), from_velocity(v)
    return 2.0 / (interval_length * np.sqrt(Ep)) * sigma2(wp, w, E)


def sigma3_tilde(sigma3, vp, v):
    """(1/2pi) (1/|v'|) sigma3(|v'|^2, |v|^2)."""
    Ep = np.sum(np.asarray(vp, float) ** 2, axis=-1)
    E = np.sum(np.asarray(v, float) ** 2, axis=-1)
    return 1.0 / (TWO_PI * np.sqrt(Ep)) * sigma3(Ep, E)


def gamma_tilde(vp, v, s):
    """|v'| gamma(|v'|^2, |v|^2, v/|v|)(s)."""
    rp = float(np.linalg.norm(vp))
    w, E = from_velocity(np.asarray(v, float))
    return rp * curve_point(rp * rp, float(E), w, s)


def apply_K1_tilde(Psi, sigma1, v, vgrid: VelocityGrid):
    """int_B sigma1~(v', v) Psi(v') dv' by the velocity-grid quadrature."""
    nodes, wts = vgrid.nodes, vgrid.weights
    vals = Psi(nodes)
    out = np.empty(len(v))
    for i, vi in enumerate(np.atleast_2d(v)):
        out[i] = np.sum(wts * sigma1_tilde(sigma1, nodes, np.broadcast_to(vi, nodes.shape)) * vals)
    return out


# ---------------------------------------------------------------------------
# the second-order operator P
# ---------------------------------------------------------------------------

def _check_chart(v):
    v = np.atleast_2d(np.asarray(v, float))
    rho2 = v[:, 0] ** 2 + v[:, 1] ** 2
    if np.any(rho2 < AXIS_TOL):
        raise DomainError("velocity too close to the v3 axis (chart singularity)")
    return v, rho2


def hessian_fd(Psi, v, h):
    """Central-difference gradient (n,3) and Hessian (n,3,3) of a callable."""
    v = np.atleast_2d(np.asarray(v, float))
    n = len(v)
    I = np.eye(3) * h
    f0 = Psi(v)
    grad = np.empty((n, 3))
    hess = np.empty((n, 3, 3))
    for i in range(3):
        fp, fm = Psi(v + I[i]), Psi(v - I[i])
        grad[:, i] = (fp - fm) / (2 * h)
        hess[:, i, i] = (fp - 2 * f0 + fm) / (h * h)
        for j in range(i + 1, 3):
            d = (Psi(v + I[i] + I[j]) - Psi(v + I[i] - I[j]) - Psi(v - I[i] + I[j])
                 + Psi(v - I[i] - I[j])) / (4 * h * h)
            hess[:, i, j] = hess[:, j, i] = d
    return grad, hess


def P_coefficients(v):
    """Coefficients of d11, d12, d13, d23, d22, d33 in P."""
    v, rho2 = _check_chart(v)
    v1, v2, v3 = v.T
    r2 = np.sum(v * v, axis=1)
    return np.stack([(r2 * v2 ** 2 + v1 ** 2 * v3 ** 2) / rho2, -2 * v1 * v2, -2 * v1 * v3, -2 * v2 * v3,
                     (r2 * v1 ** 2 + v2 ** 2 * v3 ** 2) / rho2, rho2], axis=1)


def apply_P_terms(Psi, v, h=1e-4):
    """The six terms of P Psi at ``v`` (n, 6) using central differences of step h."""
    c = P_coefficients(v)
    _, H = hessian_fd(Psi, v, h)
    derivs = np.stack([H[:, 0, 0], H[:, 0, 1], H[:, 0, 2], H[:, 1, 2], H[:, 1, 1], H[:, 2, 2]], axis=1)
    return c * derivs


def apply_P(Psi, v, h=1e-4):
    """P(x, v, D) Psi at velocity points ``v`` for a callable Psi(v[n,3])."""
    return apply_P_terms(Psi, v, h).sum(axis=1)


def radial_derivative(Psi, v, h=1e-4):
    """v . grad_v Psi by central differences."""
    g, _ = hessian_fd(Psi, v, h)
    return np.sum(np.atleast_2d(v) * g, axis=1)


# ---------------------------------------------------------------------------
# operator equivalence
# ---------------------------------------------------------------------------

@dataclass
class VelocityProblem:
    """Kernel-free transport coefficients as callables of E (one spatial point)."""

    a: object
    b: object
    Sigma: object
    x0: np.ndarray = None

    def __post_init__(self):
        self.x0 = np.zeros(3) if self.x0 is None else np.asarray(self.x0, float)


def _x_directional(psi_fn, x0, omega, E, h):
    """omega . grad_x psi at x0 by central differences."""
    out = np.zeros(len(omega))
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        out += omega[:, i] * (psi_fn(x0 + e, omega, E) - psi_fn(x0 - e, omega, E)) / (2 * h)
    return out


def T_sphere(psi_fn, vp: VelocityProblem, vgrid: VelocityGrid, h):
    """T psi on the (omega, E) grid: mesh Laplace-Beltrami, upwind energy step h."""
    sph = vgrid.sphere
    nd = sph.n
    out = []
    for E in vgrid.energies:
        om = sph.nodes
        EE = np.full(nd, E)
        psi = psi_fn(vp.x0, om, EE)
        dE = (psi_fn(vp.x0, om, EE + h) - psi) / h
        lap = sph.laplacian(psi)
        out.append(vp.a(E) * dE + vp.b(E) * lap + _x_directional(psi_fn, vp.x0, om, EE, h) + vp.Sigma(E) * psi)
    return np.concatenate(out)


def T_velocity(psi_fn, vp: VelocityProblem, v, h):
    """T~ Psi at velocity points by central differences in v and x."""
    at, bt, st = transform_functions(vp.a, vp.b, vp.Sigma)

    def Psi(w):
        om, E = from_velocity(w)
        return psi_fn(vp.x0, om, E)
    v = np.atleast_2d(v)
    om, E = from_velocity(v)
    r = np.sqrt(E)
    g, H = hessian_fd(Psi, v, h)
    c = P_coefficients(v)
    PPsi = (c[:, 0] * H[:, 0, 0] + c[:, 1] * H[:, 0, 1] + c[:, 2] * H[:, 0, 2] + c[:, 3] * H[:, 1, 2]
            + c[:, 4] * H[:, 1, 1] + c[:, 5] * H[:, 2, 2])
    radial = np.sum(v * g, axis=1)
    stream = _x_directional(psi_fn, vp.x0, om, E, h)       # (1/|v|) v . grad_x = omega . grad_x
    return bt(v) * PPsi + (at(v) - 2 * bt(v)) * radial + stream + st(v) * Psi(v)


def equivalence_residual(psi_fn, vp: VelocityProblem, vgrid: VelocityGrid, h):
    """RMS of (T psi) o H^{-1} - T~ (psi o H^{-1}) over the velocity nodes.

    ``psi_fn(x[3], omega[n,3], E[n])`` is a smooth manufactured field.  The
    left side uses the discrete sphere operators and an upwind energy
    difference (first order); the right side central differences in v.
    """
    lhs = T_sphere(psi_fn, vp, vgrid, h)
    rhs = T_velocity(psi_fn, vp, vgrid.nodes, min(h, 1e-3))
    return float(np.sqrt(np.mean((lhs - rhs) ** 2)))


def jacobian_check(psi_fn, E0, Em, level=3, n=12, rng=None):
    """(int psi domega dE, int Psi (2/|v|) dv) by independent quadratures.

    The left side uses Gauss-Legendre in E; the right side Gauss-Legendre in
    r = |v| on the velocity grid.
    """
    vg = VelocityGrid.build(level, E0, Em, n, rng)
    x, w = np.polynomial.legendre.leggauss(n)
    Es = 0.5 * (Em - E0) * x + 0.5 * (Em + E0)
    wE = 0.5 * (Em - E0) * w
    sph = vg.sphere
    lhs = sum(wE[i] * np.sum(sph.weights * psi_fn(sph.nodes, np.full(sph.n, Es[i]))) for i in range(n))
    nodes = vg.nodes
    om, E = from_velocity(nodes)
    rhs = float(np.sum(vg.weights * psi_fn(om, E) * 2.0 / np.sqrt(E)))
    return float(lhs), rhs
