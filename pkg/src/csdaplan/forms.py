"""Discrete forward/adjoint bilinear forms, functionals and norms.

Unknowns are species fields of shape (3, n_active, n_dir, n_E) flattened in
C order.  The forward form is represented by a sparse matrix A with

    B(psi, v) = v @ A @ psi,

and the adjoint form by an independently assembled matrix A_star with
B*(psi*, v) = v @ A_star @ psi*.  The discretisation is:

* energy: upwind (implicit) finite volumes with fluxes |a| at level
  interfaces, the initial condition psi(E_m) = 0 imposed weakly through the
  endpoint term -a(E_m) psi(E_m) v(E_m);
* space: first-order upwind finite volumes per direction, inflow data on
  Gamma_- entering weakly through <g, gamma_-(v)>;
* angle: the symmetric weak-form Laplace-Beltrami matrix of the sphere mesh;
* collisions: the coupled restricted operators, adjoint by weighted transpose.

Because the adjoint stencils are the exact discrete transposes, Green's
formula and the duality identities hold to rounding error.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import CsdaError, ShapeError
from .material import MaterialModel
from .phase_space import GAMMA0_TOL, PhaseSpaceGrid


@dataclass
class TransportProblem:
    """Grid, material and data of a forward/adjoint transport problem.

    ``f``/``fstar`` are species fields; ``g`` lives on the inflow part and
    ``gstar`` on the outflow part of the boundary, both of shape
    (3, n_boundary_faces, n_dir, n_E) (entries outside their side are ignored).
    """

    grid: PhaseSpaceGrid
    material: MaterialModel
    f: np.ndarray = None
    g: np.ndarray = None
    fstar: np.ndarray = None
    gstar: np.ndarray = None
    validated: bool = True

    def __post_init__(self):
        sh = self.grid.species_shape
        bsh = (3, self.grid.boundary.n_faces) + self.grid.shape[1:]
        self.f = np.zeros(sh) if self.f is None else np.asarray(self.f, float)
        self.fstar = np.zeros(sh) if self.fstar is None else np.asarray(self.fstar, float)
        self.g = np.zeros(bsh) if self.g is None else np.asarray(self.g, float)
        self.gstar = np.zeros(bsh) if self.gstar is None else np.asarray(self.gstar, float)
        for name, arr, shape in (("f", self.f, sh), ("fstar", self.fstar, sh),
                                 ("g", self.g, bsh), ("gstar", self.gstar, bsh)):
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")

    def with_data(self, **kw):
        d = dict(f=self.f, g=self.g, fstar=self.fstar, gstar=self.gstar)
        d.update(kw)
        new = TransportProblem(self.grid, self.material, validated=self.validated, **d)
        if self.__dict__.get("_assembler") is not None:       # same operator, reuse assembly
            new.__dict__["_assembler"] = self.__dict__["_assembler"]
        return new


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def streaming_matrix(grid: PhaseSpaceGrid, reverse=False):
    """Upwind streaming matrix on the (voxel, direction) index, omega-weighted.

    Returns ``(S, M_in, M_out)``.  ``S`` holds the outflow fluxes on the
    diagonal (interior and boundary outflow faces) and minus the inflow
    fluxes from upwind neighbours.  ``M_in``/``M_out`` are diagonal matrices
    of boundary inflow/outflow fluxes.  ``reverse=True`` builds the same
    objects for the reversed directions -omega (the adjoint stencil).
    """
    sp_ = grid.spatial
    sph = grid.sphere
    nv, nd = sp_.n_active, sph.n
    sgn = -1.0 if reverse else 1.0
    om = sgn * sph.nodes
    rows, cols, vals = [], [], []
    left, right, axis = sp_.interior_faces
    A = sp_.face_areas[axis]
    F = om[:, axis].T * A[:, None]                  # (n_faces, nd): flux from left to right
    d_idx = np.broadcast_to(np.arange(nd), F.shape)
    wq = sph.weights[None, :]
    pos = F > GAMMA0_TOL * A[:, None]
    neg = F < -GAMMA0_TOL * A[:, None]
    L = np.broadcast_to(left[:, None], F.shape)
    R = np.broadcast_to(right[:, None], F.shape)
    for mask, up, down in ((pos, L, R), (neg, R, L)):
        flux = (np.abs(F) * wq)[mask]
        u = up[mask] * nd + d_idx[mask]
        dn = down[mask] * nd + d_idx[mask]
        rows += [u, dn]
        cols += [u, u]
        vals += [flux, -flux]
    bd = grid.boundary
    cos = sgn * bd.cosine
    bflux = np.abs(cos) * bd.area[:, None] * wq
    vb = np.broadcast_to(bd.voxel[:, None], cos.shape)
    db = np.broadcast_to(np.arange(nd), cos.shape)
    out = cos > GAMMA0_TOL
    inn = cos < -GAMMA0_TOL
    rows.append(vb[out] * nd + db[out])
    cols.append(vb[out] * nd + db[out])
    vals.append(bflux[out])
    n = nv * nd
    S = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    m_in = np.zeros(n)
    m_out = np.zeros(n)
    np.add.at(m_in, vb[inn] * nd + db[inn], bflux[inn])
    np.add.at(m_out, vb[out] * nd + db[out], bflux[out])
    return S, sp.diags(m_in), sp.diags(m_out)


def energy_stencil(alpha_row, a_E0, adjoint=False):
    """Energy matrix of one voxel (without the omega/volume factor).

    Forward (rows = test level): row 0 is alpha_0 psi_0 (the weak initial
    condition at E_m), row k >= 1 is alpha_k (psi_k - psi_{k-1}).  Adjoint:
    row k is alpha_k psi*_k - alpha_{k+1} psi*_{k+1}, the last row
    alpha_{n-1} psi*_{n-1} (weak condition psi*(E_0) = 0 included).
    Returns the form matrix and the corresponding strong-operator matrix
    (endpoint terms removed).
    """
    n = len(alpha_row)
    M = np.zeros((n, n))
    if not adjoint:
        M[0, 0] = alpha_row[0]
        for k in range(1, n):
            M[k, k] = alpha_row[k]
            M[k, k - 1] = -alpha_row[k]
        P = M.copy()
        P[0, 0] -= alpha_row[0]
    else:
        for k in range(n - 1):
            M[k, k] = alpha_row[k]
            M[k, k + 1] = -alpha_row[k + 1]
        M[n - 1, n - 1] = alpha_row[n - 1]
        P = M.copy()
        P[n - 1, n - 1] -= -a_E0
    return M, P


def _kron_xd_k(XD, K):
    """Matrix on (x, d, k) from a (x, d) matrix and an energy matrix."""
    return sp.kron(sp.csr_matrix(XD), sp.csr_matrix(K))


class Assembler:
    """Assembles all discrete operators of one problem (grid + material)."""

    def __init__(self, grid: PhaseSpaceGrid, material: MaterialModel):
        self.grid = grid
        self.material = material
        nv, nd, nE = grid.shape
        self.n = nv * nd * nE
        self.V = grid.spatial.voxel_volume
        self.W = np.asarray(grid.cell_weights).ravel()

    # -- per-species pieces ------------------------------------------------
    @cached_property
    def _stream_fwd(self):
        return streaming_matrix(self.grid, reverse=False)

    @cached_property
    def _stream_adj(self):
        return streaming_matrix(self.grid, reverse=True)

    def _energy(self, j, adjoint):
        """(form, strong) energy matrices of charged species j on (x,d,k)."""
        g = self.grid
        nv, nd, nE = g.shape
        cf = self.material.coeffs[j]
        alpha = cf.alpha
        blocks_M, blocks_P = [], []
        for x in range(nv):
            M, P = energy_stencil(alpha[x], cf.a_E0[x], adjoint)
            blocks_M.append(sp.kron(sp.diags(self.V * g.sphere.weights), M))
            blocks_P.append(sp.kron(sp.diags(self.V * g.sphere.weights), P))
        return sp.block_diag(blocks_M, format="csr"), sp.block_diag(blocks_P, format="csr")

    def _angular(self, j):
        g = self.grid
        nv, nd, nE = g.shape
        b = self.material.coeffs[j].b                     # (nv, nE), b < 0
        c = self.V * b * g.energy.weights[None, :]        # b L is positive semidefinite
        L = g.sphere.lb_matrix.tocoo()
        x = np.arange(nv)[:, None, None]
        k = np.arange(nE)[None, None, :]
        r = (x * nd + L.row[None, :, None]) * nE + k
        cc = (x * nd + L.col[None, :, None]) * nE + k
        v = L.data[None, :, None] * c[:, None, :]
        return sp.csr_matrix((v.ravel(), (r.ravel(), cc.ravel())), shape=(self.n, self.n))

    def _stream(self, adjoint):
        S, Min, Mout = self._stream_adj if adjoint else self._stream_fwd
        w = self.grid.energy.weights
        form = _kron_xd_k(S, sp.diags(w))
        strong = _kron_xd_k(S - Min, sp.diags(w))
        return form, strong

    def _sigma(self, j):
        Sig = np.broadcast_to(self.material.Sigma[j][:, None, :], self.grid.shape).ravel()
        return sp.diags(self.W * Sig)

    # -- global matrices ---------------------------------------------------
    def _diag_blocks(self, adjoint):
        forms, strongs = [], []
        s_form, s_strong = self._stream(adjoint)
        for j in range(3):
            F = s_form + self._sigma(j)
            P = s_strong.copy()
            if self.material.charged(j):
                eM, eP = self._energy(j, adjoint)
                ang = self._angular(j)
                F = F + eM + ang
                P = P + eP + ang
            forms.append(sp.csr_matrix(F))
            strongs.append(sp.csr_matrix(P))
        return forms, strongs

    def _collision(self, adjoint):
        """W K (forward) or W K* (adjoint) as a 3x3 block matrix."""
        ks = self.material.kernels
        n = self.n
        Wd = sp.diags(self.W)
        Winv = sp.diags(1.0 / self.W)
        blocks = [[None] * 3 for _ in range(3)]
        for (k, j), op in ks.entries.items():
            Km = op.matrix()
            if not adjoint:
                blocks[j][k] = Wd @ Km
            else:
                # K* = W^{-1} K^T W, so W K* = K^T W: assembled from the adjoint stencil
                Kstar = Winv @ Km.T @ Wd
                blocks[k][j] = Wd @ Kstar
        for i in range(3):
            if blocks[i][i] is None:
                blocks[i][i] = sp.csr_matrix((n, n))
        return sp.csr_matrix(sp.bmat(blocks))

    @cached_property
    def forward(self):
        forms, _ = self._diag_blocks(False)
        return sp.csr_matrix(sp.block_diag(forms) - self._collision(False))

    @cached_property
    def adjoint(self):
        forms, _ = self._diag_blocks(True)
        return sp.csr_matrix(sp.block_diag(forms) - self._collision(True))

    @cached_property
    def P(self):
        """Weak matrix of the differential part: psi* @ P @ psi = <P psi, psi*>."""
        _, strong = self._diag_blocks(False)
        return sp.csr_matrix(sp.block_diag(strong))

    @cached_property
    def Pstar(self):
        _, strong = self._diag_blocks(True)
        return sp.csr_matrix(sp.block_diag(strong))

    # -- functionals -------------------------------------------------------
    def _boundary_load(self, h, side):
        bd = self.grid.boundary
        nv, nd, nE = self.grid.shape
        w = bd.weight_on(side)
        out = np.zeros((3, nv, nd, nE))
        for j in range(3):
            np.add.at(out[j], bd.voxel, w * h[j])
        return out.ravel()

    def load_forward(self, f, g):
        """Vector of F(v) = <f, v> + <g, gamma_-(v)>_{T^2(Gamma_-)}."""
        return (np.broadcast_to(self.W, (3, self.n)) * np.asarray(f).reshape(3, -1)).ravel() \
            + self._boundary_load(g, "-")

    def load_adjoint(self, fstar, gstar):
        """Vector of F*(v) = <f*, v> + <g*, gamma_+(v)>_{T^2(Gamma_+)}."""
        return (np.broadcast_to(self.W, (3, self.n)) * np.asarray(fstar).reshape(3, -1)).ravel() \
            + self._boundary_load(gstar, "+")

    # -- Gram matrices of the discrete norms -------------------------------
    def _trace_diag(self):
        bd = self.grid.boundary
        nv, nd, nE = self.grid.shape
        t = np.zeros((nv, nd, nE))
        np.add.at(t, bd.voxel, bd.weight)
        return t.ravel()

    def _slices_diag(self):
        nv, nd, nE = self.grid.shape
        s = np.zeros((nv, nd, nE))
        s[:, :, 0] = self.V * self.grid.sphere.weights[None, :]
        s[:, :, -1] = self.V * self.grid.sphere.weights[None, :]
        return s.ravel()

    def _h1s(self):
        g = self.grid
        nv, nd, nE = g.shape
        c = self.V * np.broadcast_to(g.energy.weights, (nv, nE))
        L = g.sphere.lb_matrix.tocoo()
        x = np.arange(nv)[:, None, None]
        k = np.arange(nE)[None, None, :]
        r = (x * nd + L.row[None, :, None]) * nE + k
        cc = (x * nd + L.col[None, :, None]) * nE + k
        v = -L.data[None, :, None] * c[:, None, :]
        return sp.csr_matrix((v.ravel(), (r.ravel(), cc.ravel())), shape=(self.n, self.n))

    def _dE(self):
        g = self.grid
        nv, nd, nE = g.shape
        h = g.energy.steps
        D = np.zeros((nE - 1, nE))
        D[np.arange(nE - 1), np.arange(nE - 1)] = 1.0 / h
        D[np.arange(nE - 1), np.arange(1, nE)] = -1.0 / h
        wts = self.V * np.outer(g.sphere.weights, h).ravel()        # (d, interface)
        De = sp.kron(sp.eye(nv * nd), sp.csr_matrix(D))
        Wi = sp.diags(np.tile(wts, nv))
        return De.T @ Wi @ De

    def _stream_seminorm(self):
        S, Min, _ = self._stream_fwd
        w = self.grid.energy.weights
        Ps = _kron_xd_k(S - Min, sp.diags(w))
        return Ps.T @ sp.diags(1.0 / self.W) @ Ps

    @cached_property
    def gram_H(self):
        base = sp.diags(self.W + self._trace_diag())
        blocks = []
        for j in range(3):
            G = base
            if self.material.charged(j):
                G = G + sp.diags(self._slices_diag()) + self._h1s()
            blocks.append(sp.csr_matrix(G))
        return sp.csr_matrix(sp.block_diag(blocks))

    @cached_property
    def gram_Hhat(self):
        stream = self._stream_seminorm()
        dE = self._dE()
        blocks = []
        for j in range(3):
            G = stream + (dE if self.material.charged(j) else 0)
            blocks.append(sp.csr_matrix(G))
        return sp.csr_matrix(self.gram_H + sp.block_diag(blocks))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

@dataclass
class AssembledSystem:
    """Sparse form matrix and right-hand side vector."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    assembler: Assembler = field(repr=False)
    adjoint: bool = False

    def form(self, trial, test):
        return float(np.ravel(test) @ (self.matrix @ np.ravel(trial)))


def _require_valid(problem: TransportProblem):
    if not problem.validated:
        raise CsdaError("problem hypotheses have not been validated")


def assembler_for(problem: TransportProblem) -> Assembler:
    cache = problem.__dict__.setdefault("_assembler", None)
    if cache is None:
        cache = Assembler(problem.grid, problem.material)
        problem.__dict__["_assembler"] = cache
    return cache


def assemble_forward(problem: TransportProblem) -> AssembledSystem:
    _require_valid(problem)
    asm = assembler_for(problem)
    return AssembledSystem(asm.forward, asm.load_forward(problem.f, problem.g), asm)


def assemble_adjoint(problem: TransportProblem) -> AssembledSystem:
    _require_valid(problem)
    asm = assembler_for(problem)
    return AssembledSystem(asm.adjoint, asm.load_adjoint(problem.fstar, problem.gstar), asm, True)


def functional_F(grid: PhaseSpaceGrid, f, g):
    """F(v) = <f, v> + <g, gamma_-(v)> as a callable on species fields."""
    W = grid.cell_weights
    bd = grid.boundary
    wm = bd.weight_on("-")

    def F(v):
        v = np.asarray(v, float)
        return float(np.sum(W * f * v) + sum(np.sum(wm * g[j] * v[j][bd.voxel]) for j in range(3)))
    return F


def functional_Fstar(grid: PhaseSpaceGrid, fstar, gstar):
    """F*(v) = <f*, v> + <g*, gamma_+(v)>."""
    W = grid.cell_weights
    bd = grid.boundary
    wp = bd.weight_on("+")

    def F(v):
        v = np.asarray(v, float)
        return float(np.sum(W * fstar * v) + sum(np.sum(wp * gstar[j] * v[j][bd.voxel]) for j in range(3)))
    return F


def norm_H(asm: Assembler, psi):
    x = np.ravel(psi)
    return float(np.sqrt(max(x @ (asm.gram_H @ x), 0.0)))


def norm_Hhat(asm: Assembler, psi):
    x = np.ravel(psi)
    return float(np.sqrt(max(x @ (asm.gram_Hhat @ x), 0.0)))


def boundedness_constant(asm: Assembler, adjoint=False):
    """Exact discrete M = max |B(psi, v)| / (|psi|_H |v|_Hhat) (dense; small grids).

    Computed as the largest singular value of R_hat^{-T} A R^{-1} with R, R_hat
    the Cholesky factors of the two Gram matrices.
    """
    A = (asm.adjoint if adjoint else asm.forward).toarray()
    R = sla.cholesky(asm.gram_H.toarray())
    Rh = sla.cholesky(asm.gram_Hhat.toarray())
    X = sla.solve_triangular(Rh, A, trans="T")
    Y = sla.solve_triangular(R, X.T, trans="T").T
    return float(np.linalg.norm(Y, 2))


def green_terms(asm: Assembler, psi, psistar):
    """Both sides of the discrete generalized Green formula.

    Returns ``(lhs, boundary, endpoints)`` where lhs = <P psi, psi*> - <psi, P* psi*>,
    boundary = sum_j int_Gamma psi_j psi*_j (omega . nu) and endpoints =
    sum_j a_j(E_m)<psi_j(E_m), psi*_j(E_m)> - a_j(E_0)<psi_j(E_0), psi*_j(E_0)>.
    """
    g = asm.grid
    psi = np.asarray(psi, float)
    psistar = np.asarray(psistar, float)
    if psi.shape != g.species_shape or psistar.shape != g.species_shape:
        raise ShapeError("psi and psi* must be species fields on the grid")
    x, y = psi.ravel(), psistar.ravel()
    lhs = float(y @ (asm.P @ x) - x @ (asm.Pstar @ y))
    bd = g.boundary
    sw = bd.weight * bd.member[:, :, None]
    boundary = float(sum(np.sum(sw * psi[j][bd.voxel] * psistar[j][bd.voxel]) for j in range(3)))
    endpoints = 0.0
    slw = asm.V * g.sphere.weights[None, :]
    for j in range(3):
        cf = asm.material.coeffs[j]
        if cf is None:
            continue
        endpoints += float(np.sum(cf.a_Em[:, None] * slw * psi[j][:, :, 0] * psistar[j][:, :, 0]))
        endpoints -= float(np.sum(cf.a_E0[:, None] * slw * psi[j][:, :, -1] * psistar[j][:, :, -1]))
    return lhs, boundary, endpoints


def green_residual(asm: Assembler, psi, psistar):
    """|<P psi, psi*> - <psi, P* psi*> - boundary term - endpoint terms|."""
    lhs, boundary, endpoints = green_terms(asm, psi, psistar)
    return abs(lhs - boundary - endpoints)


def green_residual_exact(grid: PhaseSpaceGrid, psi, psistar, P_psi, Pstar_psistar, a):
    """Green residual for analytic single-species fields by quadrature.

    ``psi``, ``psistar``, ``P_psi``, ``Pstar_psistar`` are callables of
    (x[n,3], omega[m,3], E[k]) returning arrays (n, m, k); ``a`` is a
    callable of E.  Volume integrals use cell-centre quadrature, the boundary
    integral uses face centroids, energy slices the sphere quadrature.
    """
    X = grid.spatial.centers
    Om = grid.sphere.nodes
    E = grid.energy.levels
    W = grid.cell_weights
    lhs = np.sum(W * (P_psi(X, Om, E) * psistar(X, Om, E) - psi(X, Om, E) * Pstar_psistar(X, Om, E)))
    bd = grid.boundary
    prod = psi(bd.centroid, Om, E) * psistar(bd.centroid, Om, E)
    boundary = np.sum(bd.weight * bd.member[:, :, None] * prod)
    sl = grid.spatial.voxel_volume * grid.sphere.weights[None, :]
    Em, E0 = np.array([E[0]]), np.array([E[-1]])
    endpoints = a(E[0]) * np.sum(sl * (psi(X, Om, Em) * psistar(X, Om, Em))[:, :, 0]) \
        - a(E[-1]) * np.sum(sl * (psi(X, Om, E0) * psistar(X, Om, E0))[:, :, 0])
    return float(abs(lhs - boundary - endpoints))
