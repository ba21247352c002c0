"""Assembly of the coupled material model on a phase-space grid.

Species order is (photon, electron, positron), 0-based in code.  Electrons
and positrons carry the truncated CSDA coefficients; their self-scattering is
the curve-integral restricted Moller kernel.  Inter-species couplings use
synthetic separable nonnegative kernels (the structural hypotheses are what
matter, not physical data).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import collision as col
from .errors import HypothesisError
from .phase_space import PhaseSpaceGrid
from .xsec import (A_MARGIN, MollerData, build_coefficients, build_restricted_kernel,
                   coercivity_margin, sigma_hat, sigma_kappa_extra)

PHOTON, ELECTRON, POSITRON = 0, 1, 2
CHARGED = (ELECTRON, POSITRON)
SPECIES_NAMES = ("photon", "electron", "positron")


@dataclass
class Coupling:
    """Magnitudes of the synthetic inter-species kernels."""

    photon_scatter: float = 0.3      # photon -> photon, full variety
    pair_electron: float = 0.2       # photon -> electron, full variety
    pair_positron: float = 0.05      # photon -> positron, full variety
    bremsstrahlung: float = 0.05     # electron -> photon, full variety
    annihilation: float = 0.05       # positron -> photon, energy-local variety
    positron_scale: float = 1.0      # positron Moller-type strength relative to electrons


@dataclass
class MaterialModel:
    """Coefficients, total cross sections and validated kernels for one grid."""

    coeffs: list                      # [None, CoefficientField, CoefficientField]
    Sigma: np.ndarray                 # (3, n_active, n_E): total cross section used in the forms
    kernels: col.CoupledKernelSet
    margin: float                     # discrete coercivity margin c
    kappa: float
    report: dict = field(default_factory=dict)

    @property
    def q(self):
        qs = [c for c in self.coeffs if c is not None]
        if not qs:
            return dict(q1=np.inf, q2=np.inf, q3=np.inf, c0=np.inf)
        return dict(q1=min(c.q1 for c in qs), q2=min(c.q2 for c in qs),
                    q3=min(c.q3 for c in qs), c0=min(c.c0 for c in qs))

    @property
    def c_prime(self):
        """Coercivity constant min{q1/2, q3/2, q2, 1/2, c} of the discrete form."""
        q = self.q
        return float(min(q["q1"] / 2, q["q3"] / 2, q["q2"], 0.5, self.margin))

    def charged(self, j):
        return self.coeffs[j] is not None


def _downscatter(grid: PhaseSpaceGrid):
    lv = grid.energy.levels
    return (lv[:, None] >= lv[None, :]).astype(float) / grid.energy.length


def _phase(grid: PhaseSpaceGrid):
    """Normalised (1 + cos^2) angular redistribution over omega . omega'."""
    t = grid.sphere.nodes @ grid.sphere.nodes.T
    return 3.0 / (16.0 * np.pi) * (1.0 + t * t)


def synthetic_kernel_set(grid: PhaseSpaceGrid, moller: MollerData, coupling: Coupling,
                         n_s=16, density=None):
    """Default coupled kernel set: curve kernels on the charged diagonal,
    separable full-variety kernels for photon couplings and an isotropic
    energy-local annihilation kernel."""
    nd = grid.sphere.n
    nE = grid.energy.n
    dens = moller.sigma0 if density is None else np.asarray(density, float)
    rk = build_restricted_kernel(moller, grid.energy)
    ang = _phase(grid)
    en = _downscatter(grid)
    sep = ang[:, :, None, None] * en[None, None, :, :]
    entries = {}
    entries[(ELECTRON, ELECTRON)] = col.build_K3(rk, grid, n_s)
    entries[(POSITRON, POSITRON)] = col.build_K3(rk, grid, n_s, scale=rk.scale * coupling.positron_scale)
    for (k, j), m in (((PHOTON, PHOTON), coupling.photon_scatter),
                      ((PHOTON, ELECTRON), coupling.pair_electron),
                      ((PHOTON, POSITRON), coupling.pair_positron),
                      ((ELECTRON, PHOTON), coupling.bremsstrahlung)):
        if m > 0:
            entries[(k, j)] = col.build_K1(m * sep, grid, dens)
    if coupling.annihilation > 0:
        iso = np.full((nd, nd, nE), coupling.annihilation / (4.0 * np.pi))
        entries[(POSITRON, PHOTON)] = col.build_K2(iso, grid, dens)
    return col.CoupledKernelSet(entries, grid.shape).validate()


def random_kernel_set(grid: PhaseSpaceGrid, rng, moller: MollerData = None, n_s=8, max_mag=1.0):
    """Randomised nonnegative kernel set covering all three varieties."""
    nd, nE, nv = grid.sphere.n, grid.energy.n, grid.spatial.n_active
    entries = {}
    if moller is not None:
        rk = build_restricted_kernel(moller, grid.energy)
        for j in CHARGED:
            entries[(j, j)] = col.build_K3(rk, grid, n_s, scale=rk.scale * rng.uniform(0.1, 1.0))
    for (k, j) in ((0, 0), (0, 1), (0, 2), (1, 0), (2, 1)):
        if rng.random() < 0.8:
            tab = rng.random((nd, nd, nE, nE)) * rng.uniform(0.0, max_mag) / (4 * np.pi * grid.energy.length)
            entries[(k, j)] = col.build_K1(tab, grid, rng.uniform(0.5, 1.5, nv))
    for (k, j) in ((2, 0), (1, 2)):
        if rng.random() < 0.8:
            tab = rng.random((nd, nd, nE)) * rng.uniform(0.0, max_mag) / (4 * np.pi)
            entries[(k, j)] = col.build_K2(tab, grid, rng.uniform(0.5, 1.5, nv))
    return col.CoupledKernelSet(entries, grid.shape).validate()


def default_sigma(kernels: col.CoupledKernelSet, margin):
    """Smallest Sigma_j(x, E) giving coercivity margin ``margin``."""
    need = np.maximum(kernels.row_sums(), kernels.col_sums()).max(axis=2)
    return margin + need


def build_material(grid: PhaseSpaceGrid, sigma0=1.0, kappa=2.0, margin=1.0, coupling=None,
                   n_s=16, Sigma=None, sigma_fn=sigma_hat, validate=True, kernels=None):
    """Coefficients, kernels and Sigma for every species.

    ``sigma0`` is a scalar or per-active-voxel array.  Without ``Sigma`` the
    base cross sections are chosen so that the discrete margin equals
    ``margin``; with ``Sigma`` (shape broadcastable to (3, n_active, n_E))
    the margin is computed and must be positive.
    """
    coupling = Coupling() if coupling is None else coupling
    nv, nE = grid.spatial.n_active, grid.energy.n
    s0 = np.broadcast_to(np.asarray(sigma0, float), (nv,)).copy()
    moller = MollerData(s0, kappa, np.zeros((nv, nE)))
    ce = build_coefficients(moller, grid.energy, validate=validate)
    cp = ce.scaled(coupling.positron_scale)
    if kernels is None:
        kernels = synthetic_kernel_set(grid, moller, coupling, n_s)
    extra = sigma_kappa_extra(grid.energy.levels, kappa)[None, :] * s0[:, None]
    extras = np.stack([np.zeros((nv, nE)), extra, extra * coupling.positron_scale])
    if Sigma is None:
        target = default_sigma(kernels, margin)
        base = np.maximum(target - extras, 0.0)
    else:
        base = np.broadcast_to(np.asarray(Sigma, float), (3, nv, nE)).copy()
        if np.any(base < 0):
            raise HypothesisError(A_MARGIN, "Sigma must be nonnegative")
    total = base + extras
    c = coercivity_margin(kernels, total)
    if validate and not c > 0:
        raise HypothesisError(A_MARGIN, f"coercivity margin c = {c:.6g} is not positive")
    coeffs = [None, ce.with_sigma(total[1]), cp.with_sigma(total[2])]
    report = dict(M1=kernels.M1, M2=kernels.M2, schur_bound=kernels.schur_bound, margin=c,
                  q1=min(ce.q1, cp.q1), q2=min(ce.q2, cp.q2), q3=min(ce.q3, cp.q3),
                  c0=min(ce.c0, cp.c0))
    return MaterialModel(coeffs, total, kernels, c, kappa, report)


def photon_only_material(grid: PhaseSpaceGrid, Sigma, kernels=None):
    """Material with only a photon species (charged rows are inert identity-like)."""
    nv, nE = grid.spatial.n_active, grid.energy.n
    ks = col.CoupledKernelSet({} if kernels is None else kernels, grid.shape).validate()
    S = np.zeros((3, nv, nE))
    S[:] = np.broadcast_to(np.asarray(Sigma, float), (nv, nE))
    c = coercivity_margin(ks, S)
    return MaterialModel([None, None, None], S, ks, c, 2.0, {"margin": c})
