"""Hadamard finite-part integrals and the truncated Moller approximations.

The exact Moller terms carry kernels 1/(E'-E) and 1/(E'-E)^2 on [E, kappa E].
Their finite parts are evaluated by subtracting the Taylor polynomial of the
smooth factor at E' = E (leaving a removable singularity, handled by adaptive
quadrature) and adding back the closed-form finite parts

    p.f. int_E^{kE} dE'/(E'-E)   =  ln(kE - E),
    p.f. int_E^{kE} dE'/(E'-E)^2 = -1/(kE - E).

This module validates the truncated operators against the exact ones on
analytic test fields; the solver never calls it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .collision import curve_point
from .errors import DomainError
from .phase_space import EnergyGrid, SphereGrid
from .xsec import MollerData, dmu_dEp_diag, dsigma2_dEp, sigma_hat

TWO_PI = 2.0 * np.pi
QUAD_TOL = 1e-10


@dataclass(frozen=True)
class FinitePartPlan:
    """Energy grid, kappa and the difference steps used for f' and f''."""

    energy: EnergyGrid
    kappa: float
    rel_step: float = 1e-4

    def __post_init__(self):
        if not self.kappa > 1.0:
            raise DomainError("kappa must exceed 1")
        if np.any((self.kappa - 1.0) * self.energy.levels <= 0):
            raise DomainError("kappa*E - E must be positive on I")

    def evaluate(self, order, f, E):
        return fp_integral(order, f, E, self.kappa, self.rel_step)


def _derivatives(f, E, h, one_sided=False):
    f0 = f(E)
    if one_sided:
        f1, f2 = f(E + h), f(E + 2.0 * h)
        return f0, (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h), (f0 - 2.0 * f1 + f2) / (h * h)
    fp, fm = f(E + h), f(E - h)
    return f0, (fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h)


def fp_integral(order, f, E, kappa, rel_step=1e-4, one_sided=False):
    """Finite part of int_E^{kappa E} f(E') / (E'-E)^order dE' for order 1 or 2.

    ``f`` must be a smooth scalar function of E' in a neighbourhood of
    [E, kappa E]; f' (and f'' for the guard near E'=E) are taken by central
    differences with step ``rel_step * E`` (second-order one-sided
    differences when ``one_sided`` is set, for f defined only for E' >= E).
    """
    if order not in (1, 2):
        raise DomainError("order must be 1 or 2")
    E = float(E)
    L = kappa * E - E
    if not L > 0:
        raise DomainError(f"kappa*E - E = {L} must be positive")
    h = rel_step * max(E, 1.0)
    f0, d1, d2 = _derivatives(f, E, h, one_sided)
    # below this distance the subtracted quotient is replaced by its Taylor limit
    guard = 1e-3 * L

    if order == 1:
        def g(t):
            if t < guard:
                return d1 + 0.5 * d2 * t
            return (f(E + t) - f0) / t
        val, _ = integrate.quad(g, 0.0, L, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
        return float(val + f0 * np.log(L))

    def g2(t):
        if t < guard:
            return 0.5 * d2
        return (f(E + t) - f0 - d1 * t) / (t * t)
    val, _ = integrate.quad(g2, 0.0, L, epsabs=QUAD_TOL, epsrel=QUAD_TOL, limit=200)
    return float(val + d1 * np.log(L) - f0 / L)


# ---------------------------------------------------------------------------
# truncated operators on discrete fields
# ---------------------------------------------------------------------------

def _levels_and_log(energy: EnergyGrid, kappa):
    E = energy.levels
    arg = (kappa - 1.0) * E
    if np.any(arg <= 0):
        raise DomainError("kappa*E - E must be positive on I")
    return E, np.log(arg)


def upwind_dE(psi, energy: EnergyGrid):
    """Backward (upwind for a < 0) difference of psi along the last axis.

    Levels are stored descending, so level k is differenced against the
    higher level k-1; the top level E_m uses the one-sided forward pair.
    """
    psi = np.asarray(psi, float)
    E = energy.levels
    out = np.empty_like(psi)
    out[..., 1:] = (psi[..., :-1] - psi[..., 1:]) / (E[:-1] - E[1:])
    out[..., 0] = out[..., 1] if energy.n > 1 else 0.0
    return out


def truncated_K11(psi, data: MollerData, energy: EnergyGrid):
    """2 pi ln(kE - E) sigma1_hat(x, E, E) psi for psi of shape (n_x, n_dir, n_E)."""
    E, L = _levels_and_log(energy, data.kappa)
    s1 = sigma_hat(1, E, E)[None, :] * data.sigma0[:, None]          # (n_x, n_E)
    return TWO_PI * (L * s1)[:, None, :] * np.asarray(psi, float)


def truncated_K21(psi, data: MollerData, sphere: SphereGrid, energy: EnergyGrid):
    """The four-term approximation of the order-2 Moller term.

    -2 pi s2/(kE-E) psi + ln(kE-E) s2 A psi + 2 pi s2 ln(kE-E) dpsi/dE
    + 2 pi ln(kE-E) ds2/dE' psi, with A = -pi dmu/dE'(E,E) Laplace-Beltrami.
    """
    psi = np.asarray(psi, float)
    E, L = _levels_and_log(energy, data.kappa)
    s0 = data.sigma0[:, None, None]
    s2 = sigma_hat(2, E, E)[None, None, :] * s0
    ds2 = dsigma2_dEp(E)[None, None, :] * s0
    Lb = L[None, None, :]
    lap = np.moveaxis(sphere.laplacian(np.moveaxis(psi, 1, 0)), 0, 1)
    A_psi = -np.pi * dmu_dEp_diag(E)[None, None, :] * lap
    return (-TWO_PI * s2 / ((data.kappa - 1.0) * E)[None, None, :] * psi
            + Lb * s2 * A_psi
            + TWO_PI * s2 * Lb * upwind_dE(psi, energy)
            + TWO_PI * Lb * ds2 * psi)


# ---------------------------------------------------------------------------
# exact order-1 near term and the kappa study
# ---------------------------------------------------------------------------

def cone_average(psi_fn, Eprime, E, omega, n_s=64):
    """int_0^{2 pi} psi(gamma(E', E, omega)(s), E') ds by the periodic trapezoid rule."""
    s = TWO_PI * np.arange(n_s) / n_s
    pts = curve_point(Eprime, E, omega, s)
    return TWO_PI * float(np.mean(psi_fn(pts, Eprime)))


def exact_K11(psi_fn, E, omega, kappa, sigma0=1.0, sigma_fn=sigma_hat, n_s=64):
    """p.f. int_E^{kE} f1(E', E) / (E'-E) dE' with the true f1 (curve integral)."""
    def f1(Ep):
        return float(sigma_fn(1, Ep, E, sigma0)) * cone_average(psi_fn, Ep, E, omega, n_s)
    return fp_integral(1, f1, E, kappa, one_sided=True)


def approx_K11(psi_fn, E, omega, kappa, sigma0=1.0, sigma_fn=sigma_hat):
    """2 pi ln(kE - E) sigma1(E, E) psi(omega, E) (pointwise analytic version)."""
    val = float(np.ravel(psi_fn(np.asarray(omega, float)[None, :], E))[0])
    return TWO_PI * np.log(kappa * E - E) * float(sigma_fn(1, E, E, sigma0)) * val


def kappa_consistency_report(psi_fn, kappas, energies, omegas=None, sigma0=1.0,
                             sigma_fn=sigma_hat, n_s=64):
    """Discrepancy ||K_{1,1,k} psi - K~_{1,1,k} psi|| for each kappa.

    ``psi_fn(points[n, 3], E') -> values[n]`` is an analytic test field.  The
    norm is the root-mean-square over the given energies and directions.
    Returns a list of dict rows ``{kappa, discrepancy, rate}``, where ``rate``
    is the empirical order log(d_prev/d)/log((k_prev-1)/(k-1)).
    """
    omegas = np.array([[0.0, 0.0, 1.0]]) if omegas is None else np.atleast_2d(omegas)
    rows = []
    prev = None
    for k in kappas:
        diffs = [exact_K11(psi_fn, E, w, k, sigma0, sigma_fn, n_s) - approx_K11(psi_fn, E, w, k, sigma0, sigma_fn)
                 for E in np.atleast_1d(energies) for w in omegas]
        d = float(np.sqrt(np.mean(np.square(diffs))))
        rate = np.nan
        if prev is not None and d > 0 and prev[1] > 0:
            rate = np.log(prev[1] / d) / np.log((prev[0] - 1.0) / (k - 1.0))
        rows.append(dict(kappa=float(k), discrepancy=d, rate=float(rate)))
        prev = (k, d)
    return rows


def frozen_sigma1(order, Eprime, E, sigma0=1.0):
    """sigma_hat with the order-1 coefficient frozen at E' = E.

    With this coefficient and psi independent of E', f1 is constant on
    [E, kappa E] and the truncated order-1 term is exact.
    """
    if order == 1:
        return sigma_hat(1, E, E, sigma0)
    return sigma_hat(order, Eprime, E, sigma0)


def write_report(rows, path):
    """Write (kappa, discrepancy, rate) rows as comma-separated text."""
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kappa", "discrepancy", "rate"])
        for r in rows:
            w.writerow([repr(r["kappa"]), repr(r["discrepancy"]), repr(r["rate"])])
