"""Dose functional, treatment-planning objectives and optimality fixed points.

Two control modes are supported:

* ``external`` -- the control is the inflow flux g on Gamma_- (f = 0);
* ``internal`` -- the control is the source f on G x S x I (g = 0).

For the strictly convex initializer objective

    J(u) = sum_r c_r ||d_r - D psi(u)||^2_{L^2(r)} + c_sc ||u||^2,   r in {T, C, N},

the gradient is obtained from one adjoint solve with source
f* = sum_r c_r D^* e_r (D psi - d_r):  J'(u) = -2 trace(psi*) + 2 c_sc u
(the trace is gamma_-(psi*) for external control and psi* itself for
internal control).  The optimum over the nonnegative cone satisfies
u = (trace(psi*))_+ / c_sc, which is solved by a damped projected fixed
point.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, CsdaError, ShapeError, StaleStateError
from .forms import TransportProblem, assembler_for
from .phase_space import PhaseSpaceGrid, Region
from .solver import solve_adjoint, solve_forward

log = logging.getLogger(__name__)


def neg_part(a):
    """a_- = (|a| - a) / 2."""
    a = np.asarray(a, float)
    return 0.5 * (np.abs(a) - a)


def pos_part(a):
    a = np.asarray(a, float)
    return 0.5 * (np.abs(a) + a)


def smooth_heaviside(t, eps):
    """Logistic approximation 1 / (1 + exp(-t/eps)) of the Heaviside step."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    z = np.clip(np.asarray(t, float) / eps, -700.0, 700.0)
    return 1.0 / (1.0 + np.exp(-z))


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class StoppingPowers:
    """Stopping powers varsigma_j(x, E) >= 0, shape (3, n_active, n_E)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, float)
        if v.ndim != 3 or v.shape[0] != 3:
            raise ShapeError("stopping powers must have shape (3, n_active, n_E)")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError("stopping powers must be finite and nonnegative")
        self.values = v

    @classmethod
    def uniform(cls, grid: PhaseSpaceGrid, per_species=(1.0, 1.0, 1.0)):
        nv, nE = grid.spatial.n_active, grid.energy.n
        return cls(np.broadcast_to(np.asarray(per_species, float)[:, None, None], (3, nv, nE)).copy())


@dataclass
class Prescription:
    """Region masks (over active voxels), dose levels, targets and weights."""

    target: np.ndarray
    critical: np.ndarray
    normal: np.ndarray
    D0: float = 1.0
    DC: float = 0.3
    DN: float = 0.5
    d_T: np.ndarray = None
    d_C: np.ndarray = None
    d_N: np.ndarray = None
    dose_level: float = 0.3          # d_C of the dose-volume constraint
    v_C: float = 0.5
    c_T: float = 1.0
    c_C: float = 1.0
    c_N: float = 1.0
    c_DV: float = 0.0
    c_ad: float = 0.0
    c_sc: float = 1.0
    eps: float = None

    def __post_init__(self):
        self.target = np.asarray(self.target, bool)
        self.critical = np.asarray(self.critical, bool)
        self.normal = np.asarray(self.normal, bool)
        overlap = (self.target.astype(int) + self.critical + self.normal)
        if np.any(overlap > 1):
            raise ValueError("region masks must be disjoint")
        if not 0.0 <= self.v_C <= 1.0:
            raise ValueError("v_C must lie in [0, 1]")
        for name in ("c_T", "c_C", "c_N", "c_DV", "c_ad", "c_sc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        n = self.target.size
        for name, level, mask in (("d_T", self.D0, self.target), ("d_C", self.DC, self.critical),
                                  ("d_N", self.DN, self.normal)):
            val = getattr(self, name)
            val = level * mask.astype(float) if val is None else np.broadcast_to(np.asarray(val, float), (n,)) * mask
            setattr(self, name, np.asarray(val, float))
        if self.eps is None:
            self.eps = 0.02 * self.dose_level if self.dose_level > 0 else 1e-3

    @classmethod
    def from_grid(cls, grid: PhaseSpaceGrid, **kw):
        """Masks from the voxel labels (TARGET / CRITICAL / NORMAL)."""
        lab = grid.spatial.active_labels
        return cls(lab == Region.TARGET, lab == Region.CRITICAL, lab == Region.NORMAL, **kw)

    def scaled(self, alpha):
        """Prescription with every d-target multiplied by ``alpha``."""
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(d_T=alpha * self.d_T, d_C=alpha * self.d_C, d_N=alpha * self.d_N)
        return Prescription(**kw)

    def regions(self):
        return (("T", self.target, self.d_T, self.c_T), ("C", self.critical, self.d_C, self.c_C),
                ("N", self.normal, self.d_N, self.c_N))


def _digest(a):
    return hashlib.sha1(np.ascontiguousarray(a, dtype=float).tobytes()).hexdigest()


@dataclass
class PlanState:
    mode: str
    control: np.ndarray
    psi: np.ndarray
    psistar: np.ndarray
    dose: np.ndarray
    objective: dict = field(default_factory=dict)
    kkt: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    _digest: str = field(default="", repr=False)

    def check_fresh(self):
        if self._digest != _digest(self.control):
            raise StaleStateError("control changed since psi/psi* were computed")


# ---------------------------------------------------------------------------
# dose operator
# ---------------------------------------------------------------------------

def dose(psi, sp: StoppingPowers, grid: PhaseSpaceGrid):
    """D(x) = sum_j int int varsigma_j psi_j domega dE (per active voxel)."""
    psi = np.asarray(psi, float)
    if psi.shape != grid.species_shape:
        raise ShapeError(f"psi has shape {psi.shape}, expected {grid.species_shape}")
    if sp.values.shape != (3, grid.spatial.n_active, grid.energy.n):
        raise ShapeError("stopping powers do not match the grid")
    w = grid.sphere.weights[:, None] * grid.energy.weights[None, :]          # (nd, nE)
    return np.einsum("jxk,jxdk,dk->x", sp.values, psi, w)


def dose_adjoint(d, sp: StoppingPowers, grid: PhaseSpaceGrid):
    """D^* d = (varsigma_1, varsigma_2, varsigma_3) d as a species field."""
    d = np.asarray(d, float)
    nd = grid.sphere.n
    return np.broadcast_to((sp.values * d[None, :, None])[:, :, None, :],
                           (3, d.size, nd, grid.energy.n)).copy()


def dvh_fraction(D, mask, level, volumes=None):
    """Volume fraction of ``mask`` with dose >= level (exact step)."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("empty mask")
    vol = np.ones(mask.shape) if volumes is None else np.broadcast_to(np.asarray(volumes, float), mask.shape)
    hit = (np.asarray(D, float) >= level).astype(float)
    return float(np.sum(hit[mask] * vol[mask]) / np.sum(vol[mask]))


def dvh_curve(D, mask, levels, volumes=None):
    return np.array([dvh_fraction(D, mask, lv, volumes) for lv in levels])


# ---------------------------------------------------------------------------
# planner: solver handles and control spaces
# ---------------------------------------------------------------------------

class Planner:
    """Forward/adjoint solver handles for one control mode.

    ``problem`` supplies grid and material (its data arrays are ignored);
    ``species`` lists the controlled species.
    """

    def __init__(self, problem: TransportProblem, sp: StoppingPowers, rx: Prescription,
                 mode="external", species=(0, 1, 2), tol=1e-12, max_iter=500):
        if mode not in ("external", "internal"):
            raise ValueError("mode must be 'external' or 'internal'")
        self.problem = problem
        self.grid = problem.grid
        self.sp = sp
        self.rx = rx
        self.mode = mode
        self.tol = tol
        self.max_iter = max_iter
        g = self.grid
        if rx.target.size != g.spatial.n_active:
            raise ShapeError("prescription masks do not match the grid")
        assembler_for(problem)
        self.volume = g.spatial.voxel_volume
        sel = np.zeros(3, bool)
        sel[list(species)] = True
        if mode == "external":
            wb = g.boundary.weight_on("-")
            self.weights = np.broadcast_to(wb, (3,) + wb.shape) * sel[:, None, None, None]
        else:
            self.weights = np.broadcast_to(g.cell_weights, g.species_shape) * sel[:, None, None, None]
        self.mask = self.weights > 0
        self.n_solves = 0

    # -- control space -----------------------------------------------------
    @property
    def control_shape(self):
        return self.weights.shape

    def zeros(self):
        return np.zeros(self.control_shape)

    def inner(self, u, v):
        """T^2(Gamma_-)^3 or L^2(G x S x I)^3 inner product of controls."""
        return float(np.sum(self.weights * u * v))

    def norm(self, u):
        return float(np.sqrt(max(self.inner(u, u), 0.0)))

    def project(self, u):
        return np.where(self.mask, u, 0.0)

    def random_control(self, rng, nonneg=True):
        u = rng.random(self.control_shape) if nonneg else rng.standard_normal(self.control_shape)
        return self.project(u)

    # -- solves ----------------------------------------------------------------
    def solve_psi(self, u):
        u = self.project(np.asarray(u, float))
        data = dict(g=u) if self.mode == "external" else dict(f=u)
        psi, _ = solve_forward(self.problem.with_data(**data), self.tol, self.max_iter, warn=False)
        self.n_solves += 1
        return psi

    def adjoint_source(self, D, targets=True):
        """f* = sum_r c_r D^* e_r (D - d_r) (d_r dropped when ``targets`` is false)."""
        d = np.zeros_like(D)
        for _, mask, target, c in self.rx.regions():
            d += c * mask * (D - target if targets else D)
        return dose_adjoint(d, self.sp, self.grid)

    def solve_psistar(self, D, targets=True):
        fs = self.adjoint_source(D, targets)
        psis, _ = solve_adjoint(self.problem.with_data(fstar=-fs), self.tol, self.max_iter)
        self.n_solves += 1
        return psis

    def trace(self, psistar):
        """gamma_-(psi*) on the control space (external) or psi* itself."""
        if self.mode == "external":
            bd = self.grid.boundary
            return self.project(np.stack([psistar[j][bd.voxel] for j in range(3)]))
        return self.project(psistar)

    def state(self, u, with_adjoint=True):
        u = self.project(np.asarray(u, float)).copy()
        psi = self.solve_psi(u)
        D = dose(psi, self.sp, self.grid)
        psis = self.solve_psistar(D) if with_adjoint else None
        st = PlanState(self.mode, u, psi, psis, D, _digest=_digest(u))
        st.objective = objective_initializer(st, self)
        return st

    def hessian_apply(self, u):
        """Data part of the (half) Hessian: u -> -trace(psi*) with zero targets."""
        psi = self.solve_psi(u)
        return -self.trace(self.solve_psistar(dose(psi, self.sp, self.grid), targets=False))

    def hessian_norm(self, rng=None, iters=12):
        """Power-iteration estimate of the largest eigenvalue of the data Hessian."""
        rng = np.random.default_rng(0) if rng is None else rng
        u = self.random_control(rng)
        lam = 0.0
        for _ in range(iters):
            n = self.norm(u)
            if n == 0.0:
                return 0.0
            u = u / n
            Hu = self.hessian_apply(u)
            lam = self.inner(u, Hu)
            u = Hu
        return float(lam)

    def auto_theta(self, rng=None):
        """Damping 2 / (2 + lambda_max / c_sc): optimal for the unprojected iteration."""
        return 2.0 / (2.0 + self.hessian_norm(rng) / self.rx.c_sc)

    # -- objectives ----------------------------------------------------------
    def J(self, u):
        """Initializer objective at control ``u`` (one forward solve)."""
        return self.state(u, with_adjoint=False).objective["total"]


def objective_initializer(plan: PlanState, planner: Planner):
    """Breakdown of the strictly convex initializer objective."""
    rx = planner.rx
    V = planner.volume
    out = {}
    for name, mask, target, c in rx.regions():
        out[name] = float(c * V * np.sum(mask * (target - plan.dose) ** 2))
    out["sc"] = float(rx.c_sc * planner.inner(plan.control, plan.control))
    out["total"] = float(sum(out.values()))
    return out


def objective_full(plan: PlanState, rx: Prescription, planner: Planner, eps=None):
    """Clinical objective with one-sided penalties, dose-volume and admissibility terms."""
    eps = rx.eps if eps is None else eps
    if not eps > 0:
        raise ValueError("eps must be positive")
    V = planner.volume
    D = plan.dose
    out = dict(
        T=float(rx.c_T * V * np.sum(rx.target * (rx.D0 - D) ** 2)),
        C=float(rx.c_C * V * np.sum(rx.critical * neg_part(rx.DC - D) ** 2)),
        N=float(rx.c_N * V * np.sum(rx.normal * neg_part(rx.DN - D) ** 2)),
    )
    if rx.critical.any():
        frac = float(np.mean(smooth_heaviside(D[rx.critical] - rx.dose_level, eps)))
        out["DV"] = float(rx.c_DV * neg_part(rx.v_C - frac) ** 2)
    else:
        out["DV"] = 0.0
    u = plan.control
    out["ad"] = float(rx.c_ad * planner.inner(neg_part(u), neg_part(u)))
    out["sc"] = float(rx.c_sc * planner.inner(u, u))
    out["total"] = float(sum(out.values()))
    return out


def _gradient(plan: PlanState, planner: Planner, mode):
    if plan.mode != mode:
        raise CsdaError(f"plan is for {plan.mode} control, not {mode}")
    if plan.psistar is None:
        raise StaleStateError("adjoint state missing")
    plan.check_fresh()
    return -2.0 * planner.trace(plan.psistar) + 2.0 * planner.rx.c_sc * plan.control


def gradient_external(plan: PlanState, planner: Planner):
    """J'(g) = -2 gamma_-(psi*) + 2 c_sc g on Gamma_- (Riesz representative)."""
    return _gradient(plan, planner, "external")


def gradient_internal(plan: PlanState, planner: Planner):
    """J'(f) = -2 psi* + 2 c_sc f."""
    return _gradient(plan, planner, "internal")


def kkt_residuals(plan: PlanState, planner: Planner, projected=True):
    """Stationarity / complementarity / feasibility numbers at ``plan``."""
    c = planner.rx.c_sc
    u = plan.control
    r = -planner.trace(plan.psistar) + c * u             # half the gradient
    scale = max(planner.norm(u) * max(c * planner.norm(u), planner.norm(r)), 1e-300)
    if projected:
        nat = np.minimum(u, r)
        comp = planner.inner(u, r)
        rep = dict(stationarity=planner.norm(nat), complementarity=abs(comp),
                   complementarity_rel=abs(comp) / scale,
                   pointwise_complementarity=float(np.max(np.abs(u * r), initial=0.0)),
                   primal_infeasibility=planner.norm(neg_part(u)),
                   dual_infeasibility=planner.norm(neg_part(r) * planner.mask),
                   min_control=float(u[planner.mask].min(initial=0.0)))
    else:
        rep = dict(stationarity=planner.norm(r), complementarity=0.0, complementarity_rel=0.0,
                   pointwise_complementarity=0.0, primal_infeasibility=0.0, dual_infeasibility=0.0,
                   min_control=float(u[planner.mask].min(initial=0.0)))
    return rep


def _fixed_point(planner: Planner, u0, theta, tol, max_iter, project, adapt, diverge_window=10):
    rx = planner.rx
    if not rx.c_sc > 0:
        raise CsdaError("c_sc must be positive for the fixed-point iteration")
    u = planner.zeros() if u0 is None else planner.project(np.asarray(u0, float))
    if theta == "auto":
        theta = planner.auto_theta()
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")
    history = []
    prev = np.inf
    for it in range(1, max_iter + 1):
        st = planner.state(u)
        t = planner.trace(st.psistar) / rx.c_sc
        target = pos_part(t) if project else t
        step = target - u
        r = planner.norm(step)
        history.append(dict(iteration=it, step=r, theta=theta, objective=st.objective["total"]))
        log.debug("fixed point %d: |u~ - u| = %.3e theta=%.3g J=%.6g", it, r, theta, st.objective["total"])
        un = planner.norm(u)
        if r <= tol * un or r == 0.0:
            st.history = history
            st.iterations = it
            st.converged = True
            st.kkt = kkt_residuals(st, planner, projected=project)
            return st
        if adapt and r > prev:
            theta *= 0.5
        if not adapt and it > diverge_window and r > history[-1 - diverge_window]["step"]:
            raise ConvergenceError(
                f"fixed point diverging (step {r:.3e}); reduce theta (now {theta})",
                [h["step"] for h in history])
        prev = r
        u = u + theta * step
    raise ConvergenceError(f"fixed point did not converge in {max_iter} iterations",
                           [h["step"] for h in history])


def optimize_external(planner: Planner, theta=0.5, tol=1e-11, max_iter=200, g0=None):
    """Minimise the initializer objective over g >= 0 on Gamma_-."""
    if planner.mode != "external":
        raise CsdaError("planner is not set up for external control")
    return _fixed_point(planner, g0, theta, tol, max_iter, project=True, adapt=True)


def optimize_internal(planner: Planner, theta=0.5, tol=1e-11, max_iter=200, f0=None):
    """Minimise the internal initializer objective over f >= 0."""
    if planner.mode != "internal":
        raise CsdaError("planner is not set up for internal control")
    return _fixed_point(planner, f0, theta, tol, max_iter, project=True, adapt=True)


def optimize_linear_unconstrained(planner: Planner, theta=0.5, tol=1e-11, max_iter=500, u0=None):
    """Unconstrained optimum u = trace(psi*) / c_sc by the damped linear fixed point.

    The returned state carries ``initial_point`` = (trace(psi*))_+ / c_sc in
    its KKT report, the suggested start for a global optimiser.
    """
    st = _fixed_point(planner, u0, theta, tol, max_iter, project=False, adapt=False)
    st.kkt["initial_point_norm"] = planner.norm(pos_part(st.control))
    st.__dict__["initial_point"] = pos_part(st.control)
    return st


def dense_linear_optimum(planner: Planner):
    """Normal-equation oracle for the unconstrained optimum (tiny grids only).

    Builds the dense control-to-dose matrix G column by column from direct
    solves and solves (sum_r c_r G^T V_r G + c_sc W) u = sum_r c_r G^T V_r d_r.
    """
    asm = assembler_for(planner.problem)
    A = asm.forward.toarray()
    if A.shape[0] > 20000:
        raise CsdaError("dense oracle is restricted to small grids")
    idx = np.flatnonzero(planner.mask.ravel())
    g = planner.grid
    n_c = idx.size
    loads = np.zeros((A.shape[0], n_c))
    for col, i in enumerate(idx):
        e = np.zeros(planner.control_shape)
        e.ravel()[i] = 1.0
        loads[:, col] = asm.load_forward(np.zeros(g.species_shape), e) if planner.mode == "external" \
            else asm.load_forward(e, np.zeros((3, g.boundary.n_faces) + g.shape[1:]))
    Psi = np.linalg.solve(A, loads)                                   # (n_dof, n_c)
    w = g.sphere.weights[:, None] * g.energy.weights[None, :]
    Dm = np.einsum("jxk,dk->jxdk", planner.sp.values, w).reshape(3, g.spatial.n_active, -1)
    Psi = Psi.reshape(3, g.spatial.n_active, -1, n_c)
    G = np.einsum("jxm,jxmc->xc", Dm, Psi)                             # dose per unit control
    rx = planner.rx
    lhs = rx.c_sc * np.diag(planner.weights.ravel()[idx])
    rhs = np.zeros(n_c)
    for _, mask, target, c in rx.regions():
        Gm = G * (mask * planner.volume)[:, None]
        lhs += c * G.T @ Gm
        rhs += c * Gm.T @ target
    u = np.zeros(planner.control_shape)
    u.ravel()[idx] = np.linalg.solve(lhs, rhs)
    return u


def variational_certificate(plan: PlanState, planner: Planner, rng, n=100):
    """min over sampled admissible w of J'(u)(w - u) (should be >= 0)."""
    grad = _gradient(plan, planner, plan.mode)
    scale = max(float(np.max(np.abs(plan.control), initial=0.0)), 1.0)
    vals = []
    for _ in range(n):
        w = planner.random_control(rng) * scale * rng.uniform(0.0, 2.0)
        vals.append(planner.inner(grad, w - plan.control))
    return float(min(vals))
