"""Discrete phase space G x S x I.

The spatial domain is a uniform voxel grid carrying a region label per voxel,
the sphere is an icosahedral geodesic mesh with spherical Voronoi quadrature
weights and an edge-based Laplace-Beltrami operator, and the energy interval
is a descending list of levels starting at the cut-off energy E_m.

Field layout used throughout the package: a scalar phase-space field is an
array of shape ``(n_active_voxels, n_directions, n_energies)``; a species
field stacks three of those along a leading axis.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, SphericalVoronoi

from .errors import DomainError, ShapeError

FOUR_PI = 4.0 * np.pi
GAMMA0_TOL = 1e-12  # |omega . nu| below this is treated as tangential (Gamma_0)


class Region(enum.IntEnum):
    """Voxel labels; the integer values are the on-disk u8 codes."""

    OUTSIDE = 0
    TARGET = 1
    CRITICAL = 2
    NORMAL = 3


# ---------------------------------------------------------------------------
# spatial grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SpatialGrid:
    """Uniform axis-aligned voxel grid with a label per voxel.

    ``labels`` is indexed ``[i, j, k]`` (x, y, z).  The non-Outside voxels form
    the discrete domain G; they are numbered in C order of ``[i, j, k]``.
    """

    origin: np.ndarray
    spacing: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float).reshape(3)
        spacing = np.asarray(self.spacing, dtype=float).reshape(3)
        labels = np.asarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ShapeError("labels must be a 3-D array")
        if np.any(spacing <= 0):
            raise DomainError("voxel spacing must be positive component-wise")
        if np.any(labels > max(Region)):
            raise DomainError("unknown region label")
        if not np.any(labels != Region.OUTSIDE):
            raise DomainError("the domain G is empty (all voxels Outside)")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def box(cls, dims, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), label=Region.TARGET):
        labels = np.full(tuple(int(d) for d in dims), int(label), dtype=np.uint8)
        return cls(np.asarray(origin, float), np.asarray(spacing, float), labels)

    @property
    def dims(self):
        return tuple(self.labels.shape)

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    @property
    def face_areas(self):
        """Area of a voxel face orthogonal to each axis."""
        s = self.spacing
        return np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])

    @cached_property
    def active_mask(self):
        return self.labels != Region.OUTSIDE

    @cached_property
    def active_ijk(self):
        return np.argwhere(self.active_mask)

    @cached_property
    def lookup(self):
        """Map ``[i, j, k]`` to the active index, -1 for Outside voxels."""
        lut = np.full(self.dims, -1, dtype=np.int64)
        ijk = self.active_ijk
        lut[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = np.arange(len(ijk))
        return lut

    @property
    def n_active(self):
        return len(self.active_ijk)

    @property
    def measure(self):
        """Lebesgue measure |G|."""
        return self.n_active * self.voxel_volume

    @cached_property
    def centers(self):
        return self.origin + (self.active_ijk + 0.5) * self.spacing

    @cached_property
    def active_labels(self):
        ijk = self.active_ijk
        return self.labels[ijk[:, 0], ijk[:, 1], ijk[:, 2]]

    def region_mask(self, region):
        """Boolean mask over active voxels for one region label."""
        return self.active_labels == int(region)

    def _neighbour(self, axis, step):
        ijk = self.active_ijk.copy()
        ijk[:, axis] += step
        inside = (ijk[:, axis] >= 0) & (ijk[:, axis] < self.dims[axis])
        nb = np.full(len(ijk), -1, dtype=np.int64)
        nb[inside] = self.lookup[ijk[inside, 0], ijk[inside, 1], ijk[inside, 2]]
        return nb

    @cached_property
    def interior_faces(self):
        """Faces shared by two active voxels: arrays ``(left, right, axis)``.

        The face normal points along ``+e_axis`` from ``left`` to ``right``.
        """
        left, right, axes = [], [], []
        for axis in range(3):
            nb = self._neighbour(axis, +1)
            ok = nb >= 0
            left.append(np.flatnonzero(ok))
            right.append(nb[ok])
            axes.append(np.full(int(ok.sum()), axis))
        return np.concatenate(left), np.concatenate(right), np.concatenate(axes)

    @cached_property
    def boundary_faces(self):
        """Faces of active voxels adjacent to Outside or the grid edge.

        Returns ``(voxel, normal, area, centroid)`` with outward unit normals.
        """
        vox, normals, areas, cents = [], [], [], []
        for axis in range(3):
            for step in (-1, +1):
                nb = self._neighbour(axis, step)
                idx = np.flatnonzero(nb < 0)
                nu = np.zeros(3)
                nu[axis] = step
                vox.append(idx)
                normals.append(np.tile(nu, (len(idx), 1)))
                areas.append(np.full(len(idx), self.face_areas[axis]))
                c = self.centers[idx].copy()
                c[:, axis] += 0.5 * step * self.spacing[axis]
                cents.append(c)
        return (np.concatenate(vox), np.concatenate(normals),
                np.concatenate(areas), np.concatenate(cents))

    def voxel_of(self, x):
        """Active index of the voxel containing point ``x``, or -1."""
        rel = (np.asarray(x, float) - self.origin) / self.spacing
        ijk = np.floor(rel).astype(int)
        if np.any(ijk < 0) or np.any(ijk >= np.array(self.dims)):
            return -1
        return int(self.lookup[tuple(ijk)])


def escape_time(spatial: SpatialGrid, x, omega) -> float:
    """Distance from ``x`` back along ``-omega`` to the boundary of G.

    Computes ``inf{s > 0 : x - s*omega not in G}`` by walking the voxel grid
    with a 3-D DDA (Amanatides-Woo).
    """
    x = np.asarray(x, dtype=float)
    d = -np.asarray(omega, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise DomainError("omega must be a unit vector")
    if spatial.voxel_of(x) < 0:
        raise DomainError(f"point {x} is not inside G")
    rel = (x - spatial.origin) / spatial.spacing
    ijk = np.floor(rel).astype(int)
    step = np.where(d > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = np.where(d != 0, spatial.spacing / np.abs(d), np.inf)
        nxt = np.where(d > 0, (ijk + 1 - rel), (rel - ijk)) * spatial.spacing
        t_max = np.where(d != 0, nxt / np.abs(d), np.inf)
    dims = np.array(spatial.dims)
    t = 0.0
    while True:
        axis = int(np.argmin(t_max))
        t = float(t_max[axis])
        ijk[axis] += step[axis]
        if ijk[axis] < 0 or ijk[axis] >= dims[axis] or spatial.lookup[tuple(ijk)] < 0:
            return t
        t_max[axis] += inv[axis]


# ---------------------------------------------------------------------------
# sphere
# ---------------------------------------------------------------------------

def _icosahedron():
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            v += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    v = np.array(v)
    v /= np.linalg.norm(v, axis=1)[:, None]
    return v, ConvexHull(v).simplices


def _subdivide(nodes, tris):
    nodes = list(nodes)
    cache = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = nodes[i] + nodes[j]
            nodes.append(m / np.linalg.norm(m))
            cache[key] = len(nodes) - 1
        return cache[key]

    out = []
    for a, b, c in tris:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
    return np.array(nodes), np.array(out)


def random_rotation(rng):
    """Uniformly random proper rotation matrix."""
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@dataclass(frozen=True)
class SphereGrid:
    """Geodesic mesh of S with quadrature and discrete gradient/Laplacian.

    ``lb_matrix`` is the symmetric weak-form matrix L = -G^T W_e G, so that
    ``u @ L @ v = -<grad u, grad v>`` exactly.  The pointwise Laplace-Beltrami
    operator is ``diag(weights)^{-1} L`` (see :meth:`laplacian`).
    """

    nodes: np.ndarray
    weights: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_lengths: np.ndarray
    dual_lengths: np.ndarray
    grad: sp.csr_matrix
    edge_weights: np.ndarray
    lb_matrix: sp.csr_matrix
    _hull_equations: np.ndarray = field(repr=False)
    _tri_inverse: np.ndarray = field(repr=False)

    @property
    def n(self):
        return len(self.nodes)

    @property
    def grad_pairs(self):
        """Edge list with geodesic lengths (the discrete gradient stencil)."""
        return self.edges, self.edge_lengths

    def laplacian(self, u):
        """Pointwise discrete Laplace-Beltrami of nodal samples ``u`` (axis 0)."""
        u = np.asarray(u, dtype=float)
        flat = u.reshape(u.shape[0], -1) if u.ndim > 1 else u
        out = (self.lb_matrix @ flat).reshape(u.shape)
        return out / self.weights.reshape((-1,) + (1,) * (u.ndim - 1))

    def integrate(self, u):
        return np.tensordot(self.weights, u, axes=(0, 0))

    def dirichlet(self, u, v=None):
        """Discrete <grad u, grad v>_w along axis 0."""
        gu = self.grad @ u
        gv = gu if v is None else self.grad @ v
        return np.tensordot(self.edge_weights, gu * gv, axes=(0, 0))

    def interpolation_matrix(self, points, chunk=20000):
        """Sparse (n_points x n_nodes) barycentric interpolation on the mesh.

        Each point is projected radially onto the flat triangle it falls in;
        its planar barycentric coordinates are the weights.  Nodes are
        reproduced exactly and weights are nonnegative, so positivity of the
        interpolant is preserved.
        """
        pts = np.atleast_2d(np.asarray(points, float))
        normals = self._hull_equations[:, :3]
        depth = -self._hull_equations[:, 3]
        rows, cols, vals = [], [], []
        for start in range(0, len(pts), chunk):
            p = pts[start:start + chunk]
            facet = np.argmax((p @ normals.T) / depth, axis=1)
            lam = np.einsum("pij,pj->pi", self._tri_inverse[facet], p)
            lam = np.clip(lam, 0.0, None)
            lam /= lam.sum(axis=1, keepdims=True)
            idx = np.arange(start, start + len(p))
            rows.append(np.repeat(idx, 3))
            cols.append(self.triangles[facet].ravel())
            vals.append(lam.ravel())
        m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(len(pts), self.n))
        m.sum_duplicates()
        return m


def build_sphere_grid(subdivision_level: int, rotation=None) -> SphereGrid:
    """Icosahedral geodesic mesh with Voronoi weights and an edge Laplacian.

    Level ``n`` has ``10*4**n + 2`` nodes.  An optional rotation matrix is
    applied to the nodes (used to keep nodes away from coordinate seams).
    """
    if subdivision_level < 0:
        raise DomainError("subdivision_level must be >= 0")
    nodes, tris = _icosahedron()
    for _ in range(int(subdivision_level)):
        nodes, tris = _subdivide(nodes, tris)
    if rotation is not None:
        nodes = nodes @ np.asarray(rotation, float).T
    nodes = nodes / np.linalg.norm(nodes, axis=1)[:, None]

    hull = ConvexHull(nodes)
    tris = hull.simplices.copy()
    eqs = hull.equations.copy()
    # orient every triangle counter-clockwise seen from outside
    a, b, c = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), a) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    sv = SphericalVoronoi(nodes, radius=1.0, center=np.zeros(3))
    sv.sort_vertices_of_regions()
    weights = sv.calculate_areas()

    # circumcentres of the triangles are the Voronoi vertices
    a, b, c = nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]
    cc = np.cross(b - a, c - a)
    cc /= np.linalg.norm(cc, axis=1)[:, None]

    edge_tris = {}
    for t, tri in enumerate(tris):
        for i, j in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_tris.setdefault((min(i, j), max(i, j)), []).append(t)
    edges = np.array(sorted(edge_tris))
    t1 = np.array([edge_tris[tuple(e)][0] for e in edges])
    t2 = np.array([edge_tris[tuple(e)][1] for e in edges])
    edge_len = np.arccos(np.clip(np.einsum("ij,ij->i", nodes[edges[:, 0]], nodes[edges[:, 1]]), -1, 1))
    dual_len = np.arccos(np.clip(np.einsum("ij,ij->i", cc[t1], cc[t2]), -1, 1))

    ne = len(edges)
    rows = np.repeat(np.arange(ne), 2)
    cols = edges.ravel()
    vals = np.column_stack([-1.0 / edge_len, 1.0 / edge_len]).ravel()
    grad = sp.csr_matrix((vals, (rows, cols)), shape=(ne, len(nodes)))
    w_e = dual_len * edge_len
    lb = -(grad.T @ sp.diags(w_e) @ grad)
    lb = sp.csr_matrix(0.5 * (lb + lb.T))

    tri_inv = np.linalg.inv(np.stack([nodes[tris[:, 0]], nodes[tris[:, 1]], nodes[tris[:, 2]]], axis=2))
    # re-derive facet planes for the oriented triangles
    normals = np.cross(nodes[tris[:, 1]] - nodes[tris[:, 0]], nodes[tris[:, 2]] - nodes[tris[:, 0]])
    normals /= np.linalg.norm(normals, axis=1)[:, None]
    offsets = -np.einsum("ij,ij->i", normals, nodes[tris[:, 0]])
    eqs = np.column_stack([normals, offsets])

    return SphereGrid(nodes=nodes, weights=weights, triangles=tris, edges=edges,
                      edge_lengths=edge_len, dual_lengths=dual_len, grad=grad,
                      edge_weights=w_e, lb_matrix=lb, _hull_equations=eqs,
                      _tri_inverse=tri_inv)


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EnergyGrid:
    """Strictly decreasing energy levels ``E_m = levels[0] > ... > levels[-1] = E_0``."""

    levels: np.ndarray

    def __post_init__(self):
        lv = np.asarray(self.levels, dtype=float).ravel()
        if len(lv) < 2:
            raise DomainError("need at least two energy levels")
        if np.any(np.diff(lv) >= 0):
            raise DomainError("energy levels must be strictly decreasing")
        if lv[-1] <= 0:
            raise DomainError("E_0 must be positive")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def uniform(cls, E0, Em, n):
        return cls(np.linspace(Em, E0, int(n)))

    @classmethod
    def logarithmic(cls, E0, Em, n):
        return cls(np.geomspace(Em, E0, int(n)))

    @property
    def n(self):
        return len(self.levels)

    @property
    def E0(self):
        return float(self.levels[-1])

    @property
    def Em(self):
        return float(self.levels[0])

    @property
    def length(self):
        return self.Em - self.E0

    @property
    def steps(self):
        """Positive step sizes ``levels[k-1] - levels[k]`` for k = 1..n-1."""
        return -np.diff(self.levels)

    @property
    def midpoints(self):
        """Interface energies between consecutive levels."""
        return 0.5 * (self.levels[1:] + self.levels[:-1])

    @cached_property
    def weights(self):
        """Trapezoid weights on I."""
        h = self.steps
        w = np.zeros(self.n)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        return w

    def partial_weights(self, k):
        """Trapezoid weights of levels 0..k for the integral over [E_k, E_m]."""
        w = np.zeros(self.n)
        if k == 0:
            return w
        h = self.steps[:k]
        w[:k] += 0.5 * h
        w[1:k + 1] += 0.5 * h
        return w


# ---------------------------------------------------------------------------
# boundary
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundaryFaceSet:
    """Boundary faces of G with the Gamma_-/Gamma_+/Gamma_0 split per direction.

    ``cosine[f, d] = omega_d . nu_f``; ``member`` is -1 (Gamma_-), +1 (Gamma_+)
    or 0 (Gamma_0); ``weight[f, d, k]`` is the T^2(Gamma) quadrature weight
    ``|omega . nu| * area * omega_weight * energy_weight`` (zero on Gamma_0).
    """

    voxel: np.ndarray
    normal: np.ndarray
    area: np.ndarray
    centroid: np.ndarray
    cosine: np.ndarray
    member: np.ndarray
    weight: np.ndarray

    @property
    def n_faces(self):
        return len(self.voxel)

    @property
    def inflow(self):
        return self.member == -1

    @property
    def outflow(self):
        return self.member == 1

    def weight_on(self, side):
        """T^2 weights restricted to ``'-'`` (inflow), ``'+'`` or ``'all'``."""
        if side == "all":
            return self.weight
        mask = self.inflow if side == "-" else self.outflow
        return self.weight * mask[:, :, None]

    def trace(self, psi):
        """Boundary trace of a scalar field: its value in the adjacent cell."""
        return psi[self.voxel]

    def inner(self, h1, h2, side="all"):
        """<h1, h2> in T^2(Gamma), T^2(Gamma_-) or T^2(Gamma_+)."""
        return float(np.sum(self.weight_on(side) * h1 * h2))


def classify_boundary(spatial: SpatialGrid, sphere: SphereGrid, energy: EnergyGrid) -> BoundaryFaceSet:
    vox, normal, area, cent = spatial.boundary_faces
    cos = normal @ sphere.nodes.T
    member = np.where(cos < -GAMMA0_TOL, -1, np.where(cos > GAMMA0_TOL, 1, 0)).astype(np.int8)
    w = (np.abs(cos) * (member != 0)) * area[:, None] * sphere.weights[None, :]
    weight = w[:, :, None] * energy.weights[None, None, :]
    return BoundaryFaceSet(vox, normal, area, cent, cos, member, weight)


# ---------------------------------------------------------------------------
# product space
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhaseSpaceGrid:
    """The discrete phase space with its boundary decomposition."""

    spatial: SpatialGrid
    sphere: SphereGrid
    energy: EnergyGrid
    boundary: BoundaryFaceSet

    @classmethod
    def build(cls, spatial, sphere, energy):
        if isinstance(sphere, (int, np.integer)):
            sphere = build_sphere_grid(int(sphere))
        return cls(spatial, sphere, energy, classify_boundary(spatial, sphere, energy))

    @property
    def shape(self):
        return (self.spatial.n_active, self.sphere.n, self.energy.n)

    @property
    def species_shape(self):
        return (3,) + self.shape

    @property
    def size(self):
        return int(np.prod(self.shape))

    @cached_property
    def cell_weights(self):
        """W[x, d, k] = voxel volume * omega weight * trapezoid energy weight."""
        V = self.spatial.voxel_volume
        w = V * self.sphere.weights[:, None] * self.energy.weights[None, :]
        return np.broadcast_to(w, self.shape)

    @cached_property
    def slice_weights(self):
        """Quadrature weights of an energy slice on G x S."""
        w = self.spatial.voxel_volume * self.sphere.weights
        return np.broadcast_to(w, self.shape[:2])

    def zeros(self, species=True):
        return np.zeros(self.species_shape if species else self.shape)

    def check(self, f, species=None):
        f = np.asarray(f, dtype=float)
        ok = f.shape in (self.shape, self.species_shape) if species is None else \
            f.shape == (self.species_shape if species else self.shape)
        if not ok:
            raise ShapeError(f"field shape {f.shape} does not match grid {self.shape}")
        return f

    def inner(self, u, v):
        """L^2(G x S x I) inner product (summed over species if present)."""
        self.check(u)
        self.check(v)
        return float(np.sum(self.cell_weights * u * v))

    def norm(self, u):
        return np.sqrt(self.inner(u, u))


def integrate_phase(grid: PhaseSpaceGrid, field) -> float:
    """Quadrature of a scalar phase-space field over G x S x I."""
    f = np.asarray(field, dtype=float)
    if f.shape != grid.shape:
        raise ShapeError(f"field shape {f.shape} does not match grid {grid.shape}")
    return float(np.sum(grid.cell_weights * f))
