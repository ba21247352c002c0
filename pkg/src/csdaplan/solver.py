"""Forward and adjoint solvers for the coupled transport system.

The discrete system A psi = F is solved by source iteration organised as a
block Gauss-Seidel sweep: energy levels are visited in the direction of the
characteristics (E_m -> E_0 for the forward problem, E_0 -> E_m for the
adjoint) and, inside each level, the species in cascade order (photon,
electron, positron; reversed for the adjoint).  Each (species, level) block
is an implicit streaming + collision + angular-diffusion system solved by
GMRES, preconditioned by exact per-direction upwind solves.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, CsdaError
from .forms import TransportProblem, assemble_adjoint, assemble_forward, assembler_for

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 500


@dataclass
class SolveReport:
    iterations: int
    residual: float
    history: list
    species_norms: list
    outflow_norm: float
    wall_time: float
    direction: str = "forward"
    inner_iterations: int = 0
    warnings: list = field(default_factory=list)


class _BlockSweeper:
    """Block Gauss-Seidel over (level, species) blocks of a sparse matrix."""

    def __init__(self, A, shape, adjoint):
        self.A = sp.csr_matrix(A)
        nv, nd, nE = shape
        self.shape = shape
        n = nv * nd * nE
        base = (np.arange(nv)[:, None] * nd + np.arange(nd)[None, :]).ravel() * nE   # (x, d) order
        levels = range(nE - 1, -1, -1) if adjoint else range(nE)
        species = (2, 1, 0) if adjoint else (0, 1, 2)
        self.blocks = []
        for k in levels:
            for j in species:
                idx = j * n + base + k
                R = self.A[idx]
                D = sp.csc_matrix(R[:, idx])
                if D.nnz == 0:
                    continue
                self.blocks.append((idx, R, D, self._preconditioner(D, nv, nd)))

    @staticmethod
    def _preconditioner(D, nv, nd):
        """Exact solves of the per-direction (upwind) diagonal blocks."""
        lus = []
        for d in range(nd):
            sub = np.arange(nv) * nd + d
            lus.append((sub, spla.splu(sp.csc_matrix(D[sub][:, sub]))))

        def apply(r):
            out = np.empty_like(r)
            for sub, lu in lus:
                out[sub] = lu.solve(r[sub])
            return out
        return spla.LinearOperator(D.shape, matvec=apply, dtype=float)

    def sweep(self, x, b, inner_tol):
        inner = 0
        for idx, R, D, M in self.blocks:
            xi = x[idx]
            r = b[idx] - R @ x + D @ xi
            if not np.any(r):
                x[idx] = 0.0
                continue
            counter = [0]

            def cb(_, c=counter):
                c[0] += 1
            sol, info = spla.gmres(D, r, x0=xi, rtol=inner_tol, atol=0.0, M=M, restart=40,
                                   maxiter=50, callback=cb, callback_type="pr_norm")
            inner += counter[0]
            x[idx] = sol
        return inner


def sweeper_for(asm, adjoint):
    """Block sweeper of an assembler, factorised once and cached on it."""
    key = "_sweeper_adj" if adjoint else "_sweeper_fwd"
    sw = asm.__dict__.get(key)
    if sw is None:
        sw = _BlockSweeper(asm.adjoint if adjoint else asm.forward, asm.grid.shape, adjoint)
        asm.__dict__[key] = sw
    return sw


def _solve(A, b, shape, adjoint, tol, max_iter, x0=None, sweeper=None):
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.shape[0]
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0, [], 0
    sweeper = _BlockSweeper(A, shape, adjoint) if sweeper is None else sweeper
    x = np.zeros(n) if x0 is None else np.array(x0, float).ravel()
    inner_tol = max(1e-2 * tol, 1e-15)
    history = []
    inner = 0
    for it in range(1, max_iter + 1):
        inner += sweeper.sweep(x, b, inner_tol)
        res = float(np.linalg.norm(b - A @ x) / bnorm)
        history.append(res)
        log.debug("%s sweep %d residual %.3e", "adjoint" if adjoint else "forward", it, res)
        if res <= tol:
            return x, it, res, history, inner
    raise ConvergenceError(f"no convergence in {max_iter} sweeps (residual {history[-1]:.3e})", history)


def _report(problem, psi, it, res, history, inner, t0, direction):
    g = problem.grid
    norms = [float(g.norm(psi[j])) for j in range(3)]
    bd = g.boundary
    side = "+" if direction == "forward" else "-"
    out = float(np.sqrt(sum(bd.inner(psi[j][bd.voxel], psi[j][bd.voxel], side) for j in range(3))))
    warns = []
    return SolveReport(it, res, history, norms, out, time.perf_counter() - t0, direction, inner, warns)


def compatibility_warning(problem: TransportProblem, rtol=1e-8):
    """True when inflow data is nonzero at E_m for a charged species.

    Continuity of the solution needs g_j(., ., E_m) = 0 for the charged
    species (their initial value at E_m is zero); violating data are still
    accepted.
    """
    return bool(np.any(np.abs(problem.g[1:, :, :, 0]) > rtol * (np.abs(problem.g).max() + 1e-300)))


def solve_forward(problem: TransportProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, x0=None, warn=True):
    """Solve B(psi, v) = F(v) for all v; returns (psi, SolveReport)."""
    t0 = time.perf_counter()
    sysm = assemble_forward(problem)
    x, it, res, hist, inner = _solve(sysm.matrix, sysm.rhs, problem.grid.shape, False, tol, max_iter, x0,
                                     sweeper_for(sysm.assembler, False))
    psi = x.reshape(problem.grid.species_shape)
    rep = _report(problem, psi, it, res, hist, inner, t0, "forward")
    if warn and compatibility_warning(problem):
        msg = "inflow data nonzero at E_m for a charged species; solution may be discontinuous"
        log.warning(msg)
        rep.warnings.append(msg)
    return psi, rep


def solve_adjoint(problem: TransportProblem, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, x0=None):
    """Solve B*(psi*, v) = F*(v) for all v; returns (psi*, SolveReport)."""
    t0 = time.perf_counter()
    sysm = assemble_adjoint(problem)
    x, it, res, hist, inner = _solve(sysm.matrix, sysm.rhs, problem.grid.shape, True, tol, max_iter, x0,
                                     sweeper_for(sysm.assembler, True))
    psi = x.reshape(problem.grid.species_shape)
    return psi, _report(problem, psi, it, res, hist, inner, t0, "adjoint")


def dense_solve(problem: TransportProblem, adjoint=False):
    """Monolithic direct solve of the assembled system (small grids only)."""
    sysm = assemble_adjoint(problem) if adjoint else assemble_forward(problem)
    if sysm.matrix.shape[0] > 20000:
        raise CsdaError("dense oracle is restricted to small grids")
    x = np.linalg.solve(sysm.matrix.toarray(), sysm.rhs)
    return x.reshape(problem.grid.species_shape)


def apriori_ratio(problem: TransportProblem, psi):
    """||psi||_H / (||f|| + ||g||_{T^2(Gamma_-)}); ``(0.0, True)`` for zero data."""
    asm = assembler_for(problem)
    g = problem.grid
    fn = g.norm(problem.f)
    bd = g.boundary
    gn = np.sqrt(sum(bd.inner(problem.g[j], problem.g[j], "-") for j in range(3)))
    denom = fn + gn
    if denom == 0.0:
        return 0.0, True
    x = np.ravel(psi)
    return float(np.sqrt(x @ (asm.gram_H @ x)) / denom), False
