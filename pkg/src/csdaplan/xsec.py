"""Moller-type differential cross sections and the truncated CSDA coefficients.

Energies are kinetic energies in electron rest-mass units.  For the cross
section family used here

    sigma2_hat(E', E) = s0 (E'+1)^2 / (E'(E'+2))
    sigma1_hat(E', E) = sigma2_hat (2E'+1) / ((E'+1)^2 E)
    sigma0_hat(E', E) = sigma2_hat (1/E^2 + 1/(E'+1)^2)

the hyper-singular parts of the collision operator near E' = E are replaced,
for a truncation parameter kappa > 1, by a drift term a dpsi/dE, an angular
diffusion b Delta_S psi and a modified total cross section Sigma_kappa; what
remains is a bounded integral operator with kernel sigma_r_kappa.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, HypothesisError
from .phase_space import EnergyGrid

TWO_PI = 2.0 * np.pi

# Names used when a structural assumption fails.
A_DRIFT_MONOTONE = "drift-monotone(-da/dE>=q1>0)"
A_DIFFUSION_SIGN = "diffusion-sign(-b>=q2>0)"
A_DRIFT_ENDPOINTS = "drift-endpoints(-a(E0),-a(Em)>=q3>0)"
A_DRIFT_NONZERO = "drift-nonvanishing(|a|>=c0>0)"
A_KERNEL_NONNEG = "kernel-nonnegative"
A_SCHUR = "schur-bound"
A_MARGIN = "coercivity-margin"
A_LOG_POSITIVE = "log-positive(ln(kappa*E-E)>0)"


def _as_energy(E, name="E"):
    E = np.asarray(E, dtype=float)
    if np.any(E <= 0):
        raise DomainError(f"{name} must be positive")
    return E


def mu(Eprime, E):
    """Scattering cosine mu(E', E) = sqrt(E(E'+2) / (E'(E+2))) for E' >= E."""
    Ep = _as_energy(Eprime, "Eprime")
    E = _as_energy(E)
    if np.any(Ep < E * (1.0 - 1e-14)):
        raise DomainError("mu(E', E) requires E' >= E")
    out = np.sqrt(E * (Ep + 2.0) / (Ep * (E + 2.0)))
    return np.minimum(out, 1.0)


def dmu_dEp(Eprime, E):
    """Partial derivative of mu with respect to E'."""
    Ep = _as_energy(Eprime, "Eprime")
    E = _as_energy(E)
    return -E / (Ep ** 2 * (E + 2.0)) / mu(Ep, E)


def dmu_dEp_diag(E):
    """d mu / dE' evaluated on the diagonal E' = E: -1/(E(E+2))."""
    E = _as_energy(E)
    return -1.0 / (E * (E + 2.0))


def sigma_hat(order, Eprime, E, sigma0=1.0):
    """The three Moller-type coefficient functions sigma_hat_{0,1,2}."""
    Ep = _as_energy(Eprime, "Eprime")
    E = _as_energy(E)
    s2 = sigma0 * (Ep + 1.0) ** 2 / (Ep * (Ep + 2.0))
    if order == 2:
        return s2 * np.ones_like(E)
    if order == 1:
        return s2 * (2.0 * Ep + 1.0) / ((Ep + 1.0) ** 2 * E)
    if order == 0:
        return s2 * (1.0 / E ** 2 + 1.0 / (Ep + 1.0) ** 2)
    raise DomainError("order must be 0, 1 or 2")


def dsigma2_dEp(Eprime, sigma0=1.0):
    """d sigma2_hat / dE' = -2 s0 (E'+1) / (E'^2 (E'+2)^2); independent of E."""
    Ep = _as_energy(Eprime, "Eprime")
    return -2.0 * sigma0 * (Ep + 1.0) / (Ep ** 2 * (Ep + 2.0) ** 2)


def sigma_r(Eprime, E, kappa, sigma0=1.0, sigma_fn=sigma_hat):
    """Restricted kernel sigma_r_kappa(E', E) (closed indicators)."""
    Ep, E = np.broadcast_arrays(np.asarray(Eprime, float), np.asarray(E, float))
    out = np.zeros(Ep.shape)
    near = Ep >= E
    if np.any(near):
        out[near] = sigma_fn(0, Ep[near], E[near], sigma0)
    far = Ep >= kappa * E
    if np.any(far):
        d = Ep[far] - E[far]
        s1 = sigma_fn(1, Ep[far], E[far], sigma0)
        s2 = sigma_fn(2, Ep[far], E[far], sigma0)
        out[far] += -s1 / d + s2 / d ** 2
    return out


def load_moller_table(path, delimiter=","):
    """Read tabulated (E', E, sigma0_hat, sigma1_hat, sigma2_hat) rows.

    Returns a callable with the signature of :func:`sigma_hat` that
    interpolates the table linearly (scattered data in the (E', E) plane).
    """
    from scipy.interpolate import LinearNDInterpolator

    data = np.loadtxt(path, delimiter=delimiter, comments="#", ndmin=2)
    if data.shape[1] != 5:
        raise DomainError("material table must have 5 columns: E', E, s0, s1, s2")
    pts = data[:, :2]
    interps = [LinearNDInterpolator(pts, data[:, 2 + o]) for o in range(3)]

    def table_sigma(order, Eprime, E, sigma0=1.0):
        Ep, EE = np.broadcast_arrays(np.asarray(Eprime, float), np.asarray(E, float))
        vals = interps[order](Ep, EE)
        if np.any(np.isnan(vals)):
            raise DomainError("material table does not cover the requested (E', E)")
        return sigma0 * vals

    return table_sigma


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MollerData:
    """Per-voxel strength sigma0(x), truncation kappa and base Sigma(x, E)."""

    sigma0: np.ndarray
    kappa: float
    base_Sigma: np.ndarray

    def __post_init__(self):
        s0 = np.atleast_1d(np.asarray(self.sigma0, dtype=float))
        if np.any(s0 <= 0):
            raise DomainError("sigma0 must be positive on G")
        if not self.kappa > 1.0:
            raise DomainError("kappa must exceed 1")
        Sig = np.asarray(self.base_Sigma, dtype=float)
        if np.any(Sig < 0):
            raise DomainError("base Sigma must be nonnegative")
        object.__setattr__(self, "sigma0", s0)
        object.__setattr__(self, "base_Sigma", Sig)

    def sigma_hat(self, order, x, Eprime, E):
        return sigma_hat(order, Eprime, E, self.sigma0[x])


@dataclass(frozen=True)
class CoefficientField:
    """Truncated CSDA coefficients on G x I and their discrete margins.

    ``a`` and ``b`` live on the energy levels; ``a_interface`` on the level
    midpoints (used by the upwind energy discretisation).
    """

    a: np.ndarray
    a_interface: np.ndarray
    b: np.ndarray
    Sigma_kappa: np.ndarray
    q1: float
    q2: float
    q3: float
    c0: float

    @property
    def alpha(self):
        """Upwind energy fluxes |a|: entry 0 at E_m, entry k at the k-th interface."""
        return np.concatenate([-self.a[:, :1], -self.a_interface], axis=1)

    @property
    def a_E0(self):
        return self.a[:, -1]

    @property
    def a_Em(self):
        return self.a[:, 0]

    def scaled(self, factor):
        """Coefficients of a species whose cross sections are scaled by ``factor``."""
        f = float(factor)
        return CoefficientField(self.a * f, self.a_interface * f, self.b * f,
                                self.Sigma_kappa, self.q1 * f, self.q2 * f, self.q3 * f, self.c0 * f)

    def with_sigma(self, Sigma_kappa):
        return CoefficientField(self.a, self.a_interface, self.b, np.asarray(Sigma_kappa, float),
                                self.q1, self.q2, self.q3, self.c0)


def discrete_margins(a_levels, a_interface, b, energy: EnergyGrid):
    """q1, q2, q3, c0 as discrete minima over the grid.

    q1 is the smallest slope of -a along the sequence E_m, interfaces, E_0,
    which is exactly what the discrete coercivity estimate consumes.
    """
    seq = np.concatenate([a_levels[:, :1], a_interface, a_levels[:, -1:]], axis=1)
    Eseq = np.concatenate([[energy.Em], energy.midpoints, [energy.E0]])
    slopes = -np.diff(seq, axis=1) / np.diff(Eseq)[None, :]
    q1 = float(np.min(slopes))
    q2 = float(np.min(-b))
    q3 = float(min(np.min(-a_levels[:, 0]), np.min(-a_levels[:, -1])))
    c0 = float(min(np.min(np.abs(a_levels)), np.min(np.abs(a_interface))))
    return q1, q2, q3, c0


def check_margins(q1, q2, q3, c0):
    for val, name in ((q1, A_DRIFT_MONOTONE), (q2, A_DIFFUSION_SIGN),
                      (q3, A_DRIFT_ENDPOINTS), (c0, A_DRIFT_NONZERO)):
        if not val > 0:
            raise HypothesisError(name, f"discrete margin is {val:.6g}, must be positive")


def _log_term(E, kappa):
    arg = (kappa - 1.0) * E
    if np.any(arg <= 0):
        raise DomainError("kappa*E - E must be positive on I")
    return np.log(arg)


def drift(E, kappa, sigma0=1.0):
    """a(E) = -2 pi sigma2_hat(E, E) ln(kappa E - E)."""
    return -TWO_PI * sigma_hat(2, E, E, sigma0) * _log_term(E, kappa)


def drift_derivative(E, kappa, sigma0=1.0):
    """Exact d a / dE (sigma2_hat does not depend on its second argument)."""
    E = np.asarray(E, float)
    return -TWO_PI * (dsigma2_dEp(E, sigma0) * _log_term(E, kappa) + sigma_hat(2, E, E, sigma0) / E)


def diffusion(E, kappa, sigma0=1.0):
    """b(E) = pi ln(kappa E - E) sigma2_hat(E, E) dmu/dE'(E, E)."""
    return np.pi * _log_term(E, kappa) * sigma_hat(2, E, E, sigma0) * dmu_dEp_diag(E)


def sigma_kappa_extra(E, kappa, sigma0=1.0):
    """Sigma_kappa - Sigma: the three terms moved into the total cross section."""
    E = np.asarray(E, float)
    L = _log_term(E, kappa)
    s2 = sigma_hat(2, E, E, sigma0)
    return (TWO_PI * s2 / ((kappa - 1.0) * E) - TWO_PI * L * dsigma2_dEp(E, sigma0)
            + TWO_PI * L * sigma_hat(1, E, E, sigma0))


def sign_chain_kappa2(E, sigma0=1.0):
    """Reproduce the sign chain of the kappa = 2 example at energies ``E``.

    Returns ``(-a, -da/dE, lower_bound_of_-da/dE, -b)``; all must be positive
    for E > 1 and the lower bound must not exceed -da/dE.
    """
    E = np.asarray(E, float)
    minus_a = TWO_PI * sigma_hat(2, E, E, sigma0) * np.log(E)
    minus_da = TWO_PI * sigma0 * (-2.0 * (E + 1.0) / (E ** 2 * (E + 2.0) ** 2) * np.log(E)
                                  + (E + 1.0) ** 2 / (E * (E + 2.0)) / E)
    bound = TWO_PI * sigma0 / (E ** 2 * (E + 2.0) ** 2) * (E + 1.0) * ((E + 1.0) * (E + 2.0) - 2.0 * E)
    minus_b = np.pi * sigma_hat(2, E, E, sigma0) / (E * (E + 2.0)) * np.log(E)
    return minus_a, minus_da, bound, minus_b


def build_coefficients(data: MollerData, grid: EnergyGrid, validate=True) -> CoefficientField:
    """Tabulate a, b and Sigma_kappa per voxel and energy and check margins."""
    if np.any(np.log((data.kappa - 1.0) * grid.levels) <= 0):
        raise HypothesisError(A_LOG_POSITIVE,
                              f"ln(kappa E - E) <= 0 on I (E0={grid.E0}, kappa={data.kappa})")
    s0 = data.sigma0[:, None]
    a = drift(grid.levels, data.kappa)[None, :] * s0
    a_mid = drift(grid.midpoints, data.kappa)[None, :] * s0
    b = diffusion(grid.levels, data.kappa)[None, :] * s0
    extra = sigma_kappa_extra(grid.levels, data.kappa)[None, :] * s0
    Sig = np.broadcast_to(data.base_Sigma, a.shape) + extra
    q1, q2, q3, c0 = discrete_margins(a, a_mid, b, grid)
    if validate:
        check_margins(q1, q2, q3, c0)
    return CoefficientField(a, a_mid, b, np.array(Sig), q1, q2, q3, c0)


def coefficients_from_functions(grid: EnergyGrid, n_voxels, a, b, Sigma, validate=False):
    """Coefficient field from user callables of E (same in every voxel)."""
    lv, mid = grid.levels, grid.midpoints
    A = np.tile(np.asarray(a(lv), float), (n_voxels, 1))
    Am = np.tile(np.asarray(a(mid), float), (n_voxels, 1))
    B = np.tile(np.broadcast_to(np.asarray(b(lv), float), lv.shape), (n_voxels, 1))
    S = np.tile(np.broadcast_to(np.asarray(Sigma(lv), float), lv.shape), (n_voxels, 1))
    q1, q2, q3, c0 = discrete_margins(A, Am, B, grid)
    if validate:
        check_margins(q1, q2, q3, c0)
    return CoefficientField(A, Am, B, S, q1, q2, q3, c0)


# ---------------------------------------------------------------------------
# restricted kernel (energy part of the curve-integral collision operator)
# ---------------------------------------------------------------------------

def energy_quadrature(grid: EnergyGrid):
    """wq[k, k'] = trapezoid weight of level k' in the integral over [E_k, E_m]."""
    return np.stack([grid.partial_weights(k) for k in range(grid.n)])


@dataclass(frozen=True)
class RestrictedKernel:
    """Energy table of a curve-integral kernel with per-voxel strength.

    ``table[k', k]`` is the kernel at (E', E) = (levels[k'], levels[k]) for unit
    strength; the kernel of voxel x is ``scale[x] * table``.  ``quad[k, k']``
    is the energy quadrature used by the operator.
    """

    table: np.ndarray
    scale: np.ndarray
    quad: np.ndarray
    energy: EnergyGrid = field(repr=False)

    def __post_init__(self):
        if np.any(self.table < 0):
            worst = float(self.table.min())
            raise HypothesisError(A_KERNEL_NONNEG, f"restricted kernel has entry {worst:.3g} < 0")

    @cached_property
    def energy_rows(self):
        """2 pi * sum_{k'} quad[k,k'] table[k',k]: the row integrals per E."""
        return TWO_PI * np.einsum("kq,qk->k", self.quad, self.table)

    @cached_property
    def energy_cols(self):
        """Weighted column integrals (what the adjoint integrates) per E'."""
        w = self.energy.weights
        return TWO_PI * np.einsum("k,kq,qk->q", w, self.quad, self.table) / w

    def row_sums(self):
        return self.scale[:, None] * self.energy_rows[None, :]

    def col_sums(self):
        return self.scale[:, None] * self.energy_cols[None, :]

    @property
    def M1(self):
        return float(self.row_sums().max() / TWO_PI)

    @property
    def M2(self):
        return float(self.col_sums().max() / TWO_PI)


def build_restricted_kernel(data: MollerData, grid: EnergyGrid, sigma_fn=sigma_hat) -> RestrictedKernel:
    """Tabulate sigma_r_kappa on the energy grid (zero where E' < E)."""
    Ep = grid.levels[:, None]
    E = grid.levels[None, :]
    tab = np.where(Ep >= E, sigma_r(np.maximum(Ep, E), E, data.kappa, 1.0, sigma_fn), 0.0)
    return RestrictedKernel(tab, data.sigma0.copy(), energy_quadrature(grid), grid)


def constant_kernel(value, grid: EnergyGrid, n_voxels=1) -> RestrictedKernel:
    """Downscatter kernel equal to ``value`` for E' >= E (test and synthetic use)."""
    tab = np.where(grid.levels[:, None] >= grid.levels[None, :], float(value), 0.0)
    return RestrictedKernel(tab, np.ones(n_voxels), energy_quadrature(grid), grid)


def coercivity_margin(kernels, Sigma) -> float:
    """Smallest value of Sigma - row sum and Sigma - column sum.

    ``kernels`` is anything exposing ``row_sums()`` and ``col_sums()``: a
    :class:`RestrictedKernel` (energy quadrature, shape (voxels, E)) or a
    validated coupled kernel set (shape (species, voxels, directions, E)).
    A negative value signals that the hypothesis fails.
    """
    rows = np.asarray(kernels.row_sums())
    cols = np.asarray(kernels.col_sums())
    Sig = np.asarray(Sigma, dtype=float)
    if rows.ndim == 4 and Sig.ndim == 3:
        Sig = Sig[:, :, None, :]
    return float(min(np.min(Sig - rows), np.min(Sig - cols)))
