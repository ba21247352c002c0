"""Restricted collision operators and their adjoints on discrete fields.

Three kernel varieties are supported:

* ``full``  -- integral over (omega', E') with surface and Lebesgue measure,
* ``local`` -- integral over omega' only, at the same energy,
* ``curve`` -- integral over E' of a curve integral along the cone
  {omega' : omega' . omega = mu(E', E)}, parametrised through a rotation R(omega).

Every operator is stored as a table T acting on the (direction, energy) index
of one voxel, times a per-voxel strength.  The adjoint is the transpose with
respect to the quadrature-weighted inner product, which makes
<K psi, phi> = <psi, K* phi> hold exactly on the grid.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import HypothesisError, ShapeError, CsdaError
from .phase_space import PhaseSpaceGrid, SphereGrid
from .xsec import A_KERNEL_NONNEG, TWO_PI, RestrictedKernel, mu

FULL, LOCAL, CURVE = "full", "local", "curve"
VARIETIES = (FULL, LOCAL, CURVE)


# ---------------------------------------------------------------------------
# cone geometry
# ---------------------------------------------------------------------------

def rotation_to(omega):
    """Rotation R with R e3 = omega (Rodrigues about e3 x omega).

    omega = -e3 is mapped to the fixed choice diag(1, -1, -1).
    """
    w = np.asarray(omega, dtype=float)
    c = w[2]
    s2 = w[0] ** 2 + w[1] ** 2
    if s2 == 0.0:
        return np.eye(3) if c > 0 else np.diag([1.0, -1.0, -1.0])
    K = np.array([[0.0, 0.0, w[0]],
                  [0.0, 0.0, w[1]],
                  [-w[0], -w[1], 0.0]])
    # K^2 / (1 + c), written stably for c close to -1
    f = 1.0 / (1.0 + c) if c >= 0 else (1.0 - c) / s2
    return np.eye(3) + K + f * (K @ K)


def rotations_to(omegas):
    return np.stack([rotation_to(w) for w in np.atleast_2d(omegas)])


def curve_point(Eprime, E, omega, s):
    """Point gamma(E', E, omega)(s) of the scattering cone (vectorised in s)."""
    m = float(mu(Eprime, E))
    r = np.sqrt(max(0.0, 1.0 - m * m))
    s = np.asarray(s, dtype=float)
    local = np.stack([r * np.cos(s), r * np.sin(s), np.full(s.shape, m)], axis=-1)
    return local @ rotation_to(omega).T


def cone_matrices(sphere: SphereGrid, mus, n_s):
    """C[p][d, d'] = trapezoid s-quadrature of interpolated delta at node d'.

    For every cosine ``mus[p]`` and output direction d, the cone around
    omega_d is sampled at n_s equispaced angles; each sample is spread onto
    the mesh by barycentric interpolation.  Rows sum to 2 pi.
    """
    nd = sphere.n
    R = rotations_to(sphere.nodes)                        # (nd, 3, 3)
    s = TWO_PI * np.arange(n_s) / n_s
    mats = []
    for m in np.atleast_1d(mus):
        r = np.sqrt(max(0.0, 1.0 - m * m))
        local = np.stack([r * np.cos(s), r * np.sin(s), np.full(n_s, m)], axis=1)   # (n_s, 3)
        pts = np.einsum("dij,sj->dsi", R, local).reshape(-1, 3)
        interp = sphere.interpolation_matrix(pts)                                  # (nd*n_s, nd)
        agg = sp.csr_matrix((np.full(nd * n_s, TWO_PI / n_s),
                             (np.repeat(np.arange(nd), n_s), np.arange(nd * n_s))),
                            shape=(nd, nd * n_s))
        mats.append(sp.csr_matrix(agg @ interp))
    return mats


# ---------------------------------------------------------------------------
# operators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CollisionOperator:
    """Linear operator (K psi)[x, d, k] = scale[x] * sum T[(d,k),(d',k')] psi[x, d', k'].

    ``weights`` are the (direction x energy) quadrature weights used to define
    the adjoint.
    """

    variety: str
    T: object
    scale: np.ndarray
    weights: np.ndarray
    n_dir: int
    n_E: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variety not in VARIETIES:
            raise ValueError(f"unknown variety {self.variety}")
        vals = self.T.data if sp.issparse(self.T) else self.T
        if np.any(vals < 0) or np.any(self.scale < 0):
            raise HypothesisError(A_KERNEL_NONNEG, f"{self.variety} kernel has negative entries")

    @property
    def shape(self):
        return (len(self.scale), self.n_dir, self.n_E)

    def _flat(self, psi):
        psi = np.asarray(psi, dtype=float)
        if psi.shape != self.shape:
            raise ShapeError(f"field shape {psi.shape} != {self.shape}")
        return psi.reshape(len(self.scale), -1)

    def apply(self, psi):
        X = self._flat(psi)
        Y = np.asarray(self.T @ X.T).T
        return (Y * self.scale[:, None]).reshape(self.shape)

    def apply_adjoint(self, phi):
        X = self._flat(phi) * self.weights[None, :]
        Y = np.asarray((self.T.T @ X.T).T) / self.weights[None, :]
        return (Y * self.scale[:, None]).reshape(self.shape)

    @cached_property
    def _row(self):
        return np.asarray(self.T.sum(axis=1)).ravel()

    @cached_property
    def _col(self):
        return np.asarray(self.T.T @ self.weights).ravel() / self.weights

    def row_sums(self):
        """K applied to the constant 1."""
        return (self.scale[:, None] * self._row[None, :]).reshape(self.shape)

    def col_sums(self):
        """K* applied to the constant 1 (weighted column sums)."""
        return (self.scale[:, None] * self._col[None, :]).reshape(self.shape)

    def matrix(self):
        """Sparse matrix on the flattened (voxel, direction, energy) index."""
        T = sp.csr_matrix(self.T)
        return sp.csr_matrix(sp.kron(sp.diags(self.scale), T))


def _weights(grid: PhaseSpaceGrid):
    return np.outer(grid.sphere.weights, grid.energy.weights).ravel()


def build_K3(kernel: RestrictedKernel, grid: PhaseSpaceGrid, n_s=16, scale=None) -> CollisionOperator:
    """Curve-integral operator from an energy table; E' = E is included."""
    if n_s < 4:
        raise ValueError("n_s must be at least 4")
    nd, nE = grid.sphere.n, grid.energy.n
    lv = grid.energy.levels
    pairs = [(kp, k) for k in range(nE) for kp in range(k + 1)
             if kernel.quad[k, kp] * kernel.table[kp, k] != 0.0]
    mus = [mu(lv[kp], lv[k]) for kp, k in pairs]
    cones = cone_matrices(grid.sphere, mus, n_s) if pairs else []
    rows, cols, vals = [], [], []
    for (kp, k), C in zip(pairs, cones):
        C = C.tocoo()
        rows.append(C.row * nE + k)
        cols.append(C.col * nE + kp)
        vals.append(C.data * kernel.quad[k, kp] * kernel.table[kp, k])
    if pairs:
        T = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nd * nE, nd * nE))
    else:
        T = sp.csr_matrix((nd * nE, nd * nE))
    s = kernel.scale if scale is None else np.asarray(scale, float)
    return CollisionOperator(CURVE, T, np.asarray(s, float), _weights(grid), nd, nE, {"n_s": n_s})


def build_K1(table, grid: PhaseSpaceGrid, scale) -> CollisionOperator:
    """Full-measure operator from sigma1[d', d, k', k] (incoming first)."""
    nd, nE = grid.sphere.n, grid.energy.n
    sig = np.asarray(table, float)
    if sig.shape != (nd, nd, nE, nE):
        raise ShapeError("sigma1 table must have shape (n_dir, n_dir, n_E, n_E)")
    q = grid.sphere.weights[:, None, None, None] * grid.energy.weights[None, None, :, None]
    # T[(d,k),(d',k')] = w_d' w_k' sigma[d',d,k',k]
    T = np.transpose(sig * q, (1, 3, 0, 2)).reshape(nd * nE, nd * nE)
    return CollisionOperator(FULL, T, np.asarray(scale, float), _weights(grid), nd, nE)


def build_K2(table, grid: PhaseSpaceGrid, scale) -> CollisionOperator:
    """Energy-local operator from sigma2[d', d, k] (integral over omega' only)."""
    nd, nE = grid.sphere.n, grid.energy.n
    sig = np.asarray(table, float)
    if sig.shape != (nd, nd, nE):
        raise ShapeError("sigma2 table must have shape (n_dir, n_dir, n_E)")
    T = np.zeros((nd, nE, nd, nE))
    blk = sig * grid.sphere.weights[:, None, None]     # [d', d, k]
    for k in range(nE):
        T[:, k, :, k] = blk[:, :, k].T
    return CollisionOperator(LOCAL, sp.csr_matrix(T.reshape(nd * nE, nd * nE)),
                             np.asarray(scale, float), _weights(grid), nd, nE)


def apply_K3(kernel: RestrictedKernel, psi, n_s, grid: PhaseSpaceGrid):
    return build_K3(kernel, grid, n_s).apply(psi)


def apply_K1(table, psi, grid: PhaseSpaceGrid, scale=None):
    s = np.ones(grid.spatial.n_active) if scale is None else scale
    return build_K1(table, grid, s).apply(psi)


def apply_K2(table, psi, grid: PhaseSpaceGrid, scale=None):
    s = np.ones(grid.spatial.n_active) if scale is None else scale
    return build_K2(table, grid, s).apply(psi)


# ---------------------------------------------------------------------------
# coupled set
# ---------------------------------------------------------------------------

@dataclass
class CoupledKernelSet:
    """Collision operators sigma_{kj} from species k to species j (0-based).

    ``entries[(k, j)]`` is a :class:`CollisionOperator` or absent.  Call
    :meth:`validate` before use; it computes the discrete Schur bounds.
    """

    entries: dict
    shape: tuple
    validated: bool = False
    rows: np.ndarray = None
    cols: np.ndarray = None

    def validate(self):
        rows = np.zeros((3,) + tuple(self.shape))
        cols = np.zeros((3,) + tuple(self.shape))
        for (k, j), op in self.entries.items():
            if op.shape != tuple(self.shape):
                raise ShapeError(f"kernel ({k},{j}) has shape {op.shape}")
            vals = op.T.data if sp.issparse(op.T) else op.T
            if np.any(vals < 0):
                raise HypothesisError(A_KERNEL_NONNEG, f"kernel ({k},{j}) has negative entries")
            rows[j] += op.row_sums()
            cols[k] += op.col_sums()
        self.rows, self.cols, self.validated = rows, cols, True
        return self

    def _require(self):
        if not self.validated:
            raise CsdaError("kernel set has not been validated")

    def row_sums(self):
        self._require()
        return self.rows

    def col_sums(self):
        self._require()
        return self.cols

    @property
    def M1(self):
        return float(self.row_sums().max() / TWO_PI)

    @property
    def M2(self):
        return float(self.col_sums().max() / TWO_PI)

    @property
    def schur_bound(self):
        return TWO_PI * np.sqrt(self.M1 * self.M2)

    def matrix(self):
        self._require()
        n = int(np.prod(self.shape))
        blocks = [[None] * 3 for _ in range(3)]
        for (k, j), op in self.entries.items():
            blocks[j][k] = op.matrix()
        for j in range(3):
            if blocks[j][j] is None:
                blocks[j][j] = sp.csr_matrix((n, n))
        return sp.csr_matrix(sp.bmat(blocks))


def apply_Kr_coupled(kernels: CoupledKernelSet, psi):
    """(K psi)_j = sum_k K_{kj} psi_k."""
    kernels._require()
    psi = np.asarray(psi, float)
    out = np.zeros_like(psi)
    for (k, j), op in kernels.entries.items():
        out[j] += op.apply(psi[k])
    return out


def apply_Kr_adjoint(kernels: CoupledKernelSet, phi):
    """(K* phi)_k = sum_j K*_{kj} phi_j."""
    kernels._require()
    phi = np.asarray(phi, float)
    out = np.zeros_like(phi)
    for (k, j), op in kernels.entries.items():
        out[k] += op.apply_adjoint(phi[j])
    return out


def operator_norm(kernels: CoupledKernelSet, weights, iters=300, tol=1e-10, rng=None, per_voxel=True):
    """Power iteration for the weighted 2-norm of the coupled operator.

    ``weights`` are the phase-space quadrature weights (broadcastable to the
    species field).  Every kernel acts voxel by voxel, so the operator is
    block diagonal in x and its norm is the largest block norm.  With
    ``per_voxel`` each voxel's iterate is normalised separately, which makes
    the convergence rate depend on the spectral gap inside a block rather
    than on the (often tiny) gap between blocks.  Returns a lower estimate
    that converges to the norm.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    shape = (3,) + tuple(kernels.shape)
    W = np.broadcast_to(weights, shape)
    axes = (0, 2, 3) if per_voxel else (0, 1, 2, 3)

    def nrm(z):
        return np.sqrt(np.sum(W * z * z, axis=axes, keepdims=True))

    x = rng.random(shape)
    x = x / nrm(x)
    est = 0.0
    for _ in range(iters):
        y = apply_Kr_adjoint(kernels, apply_Kr_coupled(kernels, x))
        lam = nrm(y)
        top = float(lam.max())
        if top == 0.0:
            return 0.0
        x = y / np.where(lam > 0, lam, 1.0)
        new = np.sqrt(top)
        if abs(new - est) <= tol * max(new, 1.0):
            est = new
            break
        est = new
    return float(est)
