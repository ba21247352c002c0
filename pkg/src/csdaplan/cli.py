"""Command-line front end.

    csdaplan validate | forward | adjoint | plan --mode=external|internal|linear | kappa-study
             [--config PATH] [--out DIR] [--threads N] [--seed N]

Exit status: 0 success, 1 validation failure, 2 solver non-convergence, 3 I/O.
"""
from __future__ import annotations

import argparse
import logging
import os
import platform
import sys
import time

import numpy as np
import scipy
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from . import collision as col
from . import dose_planner as dp
from .config import FACES, ConfigError, RunConfig, load_config
from .errors import ConvergenceError, CsdaError, HypothesisError
from .forms import TransportProblem
from .hypersingular import kappa_consistency_report
from .io import sha256, write_csv, write_manifest, write_raw
from .material import SPECIES_NAMES, Coupling, build_material
from .phase_space import EnergyGrid, PhaseSpaceGrid, Region, SpatialGrid
from .solver import solve_adjoint, solve_forward
from .xsec import (A_DIFFUSION_SIGN, A_DRIFT_ENDPOINTS, A_DRIFT_MONOTONE, A_DRIFT_NONZERO,
                   A_KERNEL_NONNEG, A_MARGIN, A_SCHUR)

log = logging.getLogger("csdaplan")

EXIT_OK, EXIT_VALIDATION, EXIT_CONVERGENCE, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# setup from config
# ---------------------------------------------------------------------------

class Setup:
    """Grid, material and data built from a RunConfig."""

    def __init__(self, cfg: RunConfig, validate=True):
        self.cfg = cfg
        g, gr, ph = cfg["geometry"], cfg["grid"], cfg["physics"]
        self.spatial = SpatialGrid(np.asarray(g["origin"], float), np.asarray(g["spacing"], float), cfg.labels)
        mk = EnergyGrid.logarithmic if gr["energy_spacing"] == "logarithmic" else EnergyGrid.uniform
        self.energy = mk(float(gr["E0"]), float(gr["Em"]), int(gr["n_energy"]))
        self.grid = PhaseSpaceGrid.build(self.spatial, int(gr["sphere_level"]), self.energy)
        if cfg.sigma0_map is not None:
            ijk = self.spatial.active_ijk
            sigma0 = cfg.sigma0_map[ijk[:, 0], ijk[:, 1], ijk[:, 2]]
        else:
            sigma0 = float(ph["sigma0"])
        Sigma = ph["Sigma"]
        self.material = build_material(self.grid, sigma0=sigma0, kappa=float(ph["kappa"]),
                                       margin=float(ph["margin"]), coupling=Coupling(**ph["coupling"]),
                                       n_s=int(ph["n_s"]), Sigma=None if Sigma is None else float(Sigma),
                                       validate=validate)
        self.sp = dp.StoppingPowers.uniform(self.grid, tuple(ph["stopping_powers"]))

    def region_mask(self, name):
        lab = self.spatial.active_labels
        if name == "all":
            return np.ones(lab.shape, bool)
        return lab == {"target": Region.TARGET, "critical": Region.CRITICAL, "normal": Region.NORMAL}[name]

    def volume_source(self, source):
        f = self.grid.zeros()
        m = self.region_mask(source.get("region", "target"))
        for j in source["species"]:
            f[j][m] = float(source["value"])
        return f

    def face_data(self, source, side):
        bd = self.grid.boundary
        axis, sign = FACES[source["face"]]
        out = np.zeros((3, bd.n_faces) + self.grid.shape[1:])
        on_face = bd.normal[:, axis] * sign > 0.5
        member = bd.member == (-1 if side == "-" else 1)
        sel = (on_face[:, None] & member)[:, :, None]
        for j in source["species"]:
            out[j] = np.where(sel, float(source["value"]), 0.0)
        return out

    def problem(self):
        s = self.cfg["source"]
        return TransportProblem(self.grid, self.material, f=self.volume_source(s["f"]),
                                g=self.face_data(s["g"], "-"), fstar=self.volume_source(s["fstar"]),
                                gstar=self.face_data(s["gstar"], "+"))

    def prescription(self):
        p = dict(self.cfg["prescription"])
        p.pop("species", None)
        p.pop("dvh_levels", None)
        return dp.Prescription.from_grid(self.grid, **p)

    def to_volume(self, values):
        vol = np.zeros(self.spatial.dims)
        ijk = self.spatial.active_ijk
        vol[ijk[:, 0], ijk[:, 1], ijk[:, 2]] = values
        return vol

    def grid_meta(self):
        return dict(dims=list(self.spatial.dims), spacing=list(map(float, self.spatial.spacing)),
                    origin=list(map(float, self.spatial.origin)), n_directions=self.grid.sphere.n,
                    energy_levels=self.energy.levels.tolist(), species_order=list(SPECIES_NAMES))


# ---------------------------------------------------------------------------
# validation suite
# ---------------------------------------------------------------------------

def run_validation(setup: Setup, rng, n_samples=200):
    """Evaluate every structural hypothesis; returns (ok, checks, first_failure)."""
    mat = setup.material
    checks = []

    def add(name, value, ok, detail=""):
        checks.append(dict(assumption=name, value=float(value), passed=bool(ok), detail=detail))

    q = mat.q
    add(A_DRIFT_MONOTONE, q["q1"], q["q1"] > 0, "q1 = min -da/dE")
    add(A_DIFFUSION_SIGN, q["q2"], q["q2"] > 0, "q2 = min -b")
    add(A_DRIFT_ENDPOINTS, q["q3"], q["q3"] > 0, "q3 = min(-a(E0), -a(Em))")
    add(A_DRIFT_NONZERO, q["c0"], q["c0"] > 0, "c0 = min |a|")
    ks = mat.kernels
    neg = min((float(op.T.min()) if hasattr(op.T, "min") else 0.0) for op in ks.entries.values()) \
        if ks.entries else 0.0
    add(A_KERNEL_NONNEG, neg, neg >= 0, "min kernel entry")
    W = setup.grid.cell_weights
    norm = col.operator_norm(ks, W, iters=300, rng=rng)
    add(A_SCHUR, ks.schur_bound - norm, norm <= ks.schur_bound + 1e-6,
        f"power-iteration norm {norm:.6g} vs 2 pi sqrt(M1 M2) = {ks.schur_bound:.6g}")
    add(A_MARGIN, mat.margin, mat.margin > 0, "c = min(Sigma - row sums, Sigma - column sums)")
    worst = np.inf
    Wb = np.broadcast_to(W, setup.grid.species_shape)
    for _ in range(n_samples):
        psi = rng.standard_normal(setup.grid.species_shape)
        Kpsi = col.apply_Kr_coupled(ks, psi)
        num = np.sum(Wb * (mat.Sigma[:, :, None, :] * psi - Kpsi) * psi)
        worst = min(worst, num / np.sum(Wb * psi * psi) - mat.margin)
    add("coercivity-samples", worst, worst >= -1e-8,
        f"min over {n_samples} samples of <(Sigma-K)psi,psi>/|psi|^2 - c")
    failed = [c for c in checks if not c["passed"]]
    return not failed, checks, (failed[0]["assumption"] if failed else None)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig, command, argv):
        self.cfg = cfg
        self.command = command
        self.out = cfg.out_dir
        self.t0 = time.perf_counter()
        self.manifest = dict(command=command, argv=list(argv), config=cfg.echo(), seed=cfg.seed,
                             versions=dict(csdaplan=__version__, numpy=np.__version__, scipy=scipy.__version__,
                                           pyyaml=yaml.__version__, python=platform.python_version()),
                             timings={}, validation={}, outputs={}, results={})
        os.makedirs(self.out, exist_ok=True)

    def timed(self, key, fn, *a, **kw):
        t = time.perf_counter()
        out = fn(*a, **kw)
        self.manifest["timings"][key] = time.perf_counter() - t
        return out

    def record(self, name, path):
        self.manifest["outputs"][name] = dict(path=os.path.relpath(path, self.out), sha256=sha256(path))

    def raw(self, name, array, meta):
        path = os.path.join(self.out, name + ".f64")
        write_raw(path, array, meta)
        self.record(name, path)

    def csv(self, name, header, rows):
        path = os.path.join(self.out, name + ".csv")
        write_csv(path, header, rows)
        self.record(name, path)

    def finish(self, status):
        self.manifest["status"] = status
        self.manifest["timings"]["total"] = time.perf_counter() - self.t0
        write_manifest(os.path.join(self.out, "manifest.json"), self.manifest)


def _validate_into(run: Run, setup: Setup, rng):
    ok, checks, failure = run.timed(
        "validation", run_validation, setup, rng, int(run.cfg["validation"]["coercivity_samples"]))
    run.manifest["validation"] = dict(passed=ok, checks=checks, failed_assumption=failure,
                                      report=setup.material.report, c_prime=setup.material.c_prime)
    for c in checks:
        log.info("%-45s %s  %.6g  %s", c["assumption"], "ok  " if c["passed"] else "FAIL", c["value"], c["detail"])
    if not ok:
        log.error("validation failed: %s", failure)
    return ok


def cmd_validate(run: Run, args):
    setup = run.timed("setup", Setup, run.cfg, validate=False)
    ok = _validate_into(run, setup, np.random.default_rng(run.cfg.seed))
    return EXIT_OK if ok else EXIT_VALIDATION


def _prepared(run: Run):
    setup = run.timed("setup", Setup, run.cfg, validate=False)
    if not _validate_into(run, setup, np.random.default_rng(run.cfg.seed)):
        return None
    return setup


def _export_species(run, setup, name, psi):
    meta = setup.grid_meta()
    meta["layout"] = "species, active voxel (C order of active_ijk), direction, energy"
    run.raw(name, psi, meta)


def cmd_forward(run: Run, args):
    setup = _prepared(run)
    if setup is None:
        return EXIT_VALIDATION
    s = run.cfg["solver"]
    problem = setup.problem()
    psi, rep = run.timed("solve", solve_forward, problem, float(s["tol"]), int(s["max_iter"]))
    D = dp.dose(psi, setup.sp, setup.grid)
    _export_species(run, setup, "flux", psi)
    run.raw("dose", setup.to_volume(D), setup.grid_meta())
    run.manifest["results"] = dict(iterations=rep.iterations, residual=rep.residual, history=rep.history,
                                   species_norms=rep.species_norms, outflow_norm=rep.outflow_norm,
                                   warnings=rep.warnings, max_dose=float(D.max(initial=0.0)))
    return EXIT_OK


def cmd_adjoint(run: Run, args):
    setup = _prepared(run)
    if setup is None:
        return EXIT_VALIDATION
    s = run.cfg["solver"]
    psis, rep = run.timed("solve", solve_adjoint, setup.problem(), float(s["tol"]), int(s["max_iter"]))
    _export_species(run, setup, "adjoint_flux", psis)
    run.manifest["results"] = dict(iterations=rep.iterations, residual=rep.residual, history=rep.history,
                                   species_norms=rep.species_norms, inflow_norm=rep.outflow_norm)
    return EXIT_OK


def cmd_plan(run: Run, args):
    setup = _prepared(run)
    if setup is None:
        return EXIT_VALIDATION
    s = run.cfg["solver"]
    rx = setup.prescription()
    mode = args.mode
    species = tuple(run.cfg["prescription"]["species"])
    planner = dp.Planner(setup.problem(), setup.sp, rx, mode="internal" if mode == "internal" else "external",
                         species=species, tol=float(s["tol"]) * 1e-2, max_iter=int(s["max_iter"]))
    theta = s["theta"] if s["theta"] == "auto" else float(s["theta"])
    tol, mi = float(s["plan_tol"]), int(s["plan_max_iter"])
    if mode == "external":
        st = run.timed("optimize", dp.optimize_external, planner, theta, tol, mi)
    elif mode == "internal":
        st = run.timed("optimize", dp.optimize_internal, planner, theta, tol, mi)
    else:
        st = run.timed("optimize", dp.optimize_linear_unconstrained, planner, theta, tol, mi)
    full = dp.objective_full(st, rx, planner)
    run.raw("control", st.control, dict(setup.grid_meta(), mode=mode))
    if mode == "linear":
        run.raw("initial_point", dp.pos_part(st.control), dict(setup.grid_meta(), mode=mode))
    run.raw("dose", setup.to_volume(st.dose), setup.grid_meta())
    levels = np.linspace(0.0, 1.25 * max(float(st.dose.max(initial=0.0)), rx.D0),
                         int(run.cfg["prescription"]["dvh_levels"]))
    rows = []
    for lv in levels:
        row = [float(lv)]
        for mask in (rx.target, rx.critical, rx.normal):
            row.append(dp.dvh_fraction(st.dose, mask, lv) if mask.any() else float("nan"))
        rows.append(row)
    run.csv("dvh", ["dose", "target", "critical", "normal"], rows)
    run.csv("objective", ["term", "initializer", "full"],
            [[k, st.objective.get(k, float("nan")), full.get(k, float("nan"))]
             for k in ("T", "C", "N", "DV", "ad", "sc", "total")])
    run.csv("iterations", ["iteration", "step", "theta", "objective"],
            [[h["iteration"], h["step"], h["theta"], h["objective"]] for h in st.history])
    run.manifest["results"] = dict(mode=mode, iterations=st.iterations, converged=st.converged, kkt=st.kkt,
                                   objective=st.objective, objective_full=full, solves=planner.n_solves)
    return EXIT_OK


def cmd_kappa_study(run: Run, args):
    ks = run.cfg["kappa_study"]
    fields = {"E^2": lambda p, E: np.full(len(p), E * E),
              "E^3": lambda p, E: np.full(len(p), E ** 3),
              "cone": lambda p, E: p[:, 2] ** 2 * E}
    if ks["field"] not in fields:
        raise ConfigError(f"kappa_study.field must be one of {sorted(fields)}")
    rows = run.timed("kappa_study", kappa_consistency_report, fields[ks["field"]],
                     [float(k) for k in ks["kappas"]], [float(e) for e in ks["energies"]])
    run.csv("kappa_study", ["kappa", "discrepancy", "rate"],
            [[r["kappa"], r["discrepancy"], r["rate"]] for r in rows])
    d = [r["discrepancy"] for r in rows]
    run.manifest["results"] = dict(rows=rows, strictly_decreasing=bool(all(b < a for a, b in zip(d, d[1:]))))
    return EXIT_OK


COMMANDS = {"validate": cmd_validate, "forward": cmd_forward, "adjoint": cmd_adjoint,
            "plan": cmd_plan, "kappa-study": cmd_kappa_study}


def build_parser():
    p = argparse.ArgumentParser(prog="csdaplan", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration (defaults used when omitted)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP threads")
    p.add_argument("--seed", type=int, default=None, help="seed for randomised checks")
    p.add_argument("--mode", choices=("external", "internal", "linear"), default="external",
                   help="control mode for 'plan'")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    over = {}
    if args.out:
        over["output"] = {"dir": os.path.abspath(args.out)}
    if args.seed is not None:
        over["seed"] = args.seed
    try:
        cfg = load_config(args.config, over)
    except ConfigError as exc:
        print(f"configuration rejected: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, yaml.YAMLError) as exc:
        print(f"cannot read configuration: {exc}", file=sys.stderr)
        return EXIT_IO
    if args.threads is not None and args.threads < 1:
        print("--threads must be positive", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        run = Run(cfg, args.command, argv)
    except OSError as exc:
        print(f"cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    status = EXIT_OK
    try:
        with threadpool_limits(limits=args.threads):
            status = COMMANDS[args.command](run, args)
    except HypothesisError as exc:
        run.manifest["error"] = dict(kind="hypothesis", assumption=exc.assumption, message=str(exc))
        print(f"validation failure: {exc}", file=sys.stderr)
        status = EXIT_VALIDATION
    except ConfigError as exc:
        run.manifest["error"] = dict(kind="config", message=str(exc))
        print(f"configuration rejected: {exc}", file=sys.stderr)
        status = EXIT_VALIDATION
    except ConvergenceError as exc:
        run.manifest["error"] = dict(kind="convergence", message=str(exc), history=exc.history)
        print(f"no convergence: {exc}", file=sys.stderr)
        status = EXIT_CONVERGENCE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CsdaError as exc:
        run.manifest["error"] = dict(kind="error", message=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_VALIDATION
    try:
        run.finish(status)
    except OSError as exc:
        print(f"cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    return status


if __name__ == "__main__":
    sys.exit(main())
