"""Run configuration: YAML ingestion, defaults and invariants."""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import CsdaError
from .phase_space import Region

OUT_ENV = "CSDAPLAN_OUT"

DEFAULTS = {
    "geometry": {
        "dims": [6, 6, 3],
        "spacing": [0.5, 0.5, 0.5],
        "origin": [0.0, 0.0, 0.0],
        "labels": None,            # path to a u8 label volume (x fastest) or None for the built-in phantom
    },
    "grid": {
        "sphere_level": 0,
        "E0": 1.5,
        "Em": 5.0,
        "n_energy": 5,
        "energy_spacing": "uniform",
    },
    "physics": {
        "kappa": 2.0,
        "sigma0": 1.0,             # constant or path to a float64 map over the full volume
        "margin": 0.5,
        "Sigma": None,             # override of the base total cross section (constant)
        "n_s": 8,
        "coupling": {},
        "stopping_powers": [1.0, 1.0, 1.0],
    },
    "source": {
        "f": {"species": [], "value": 0.0, "region": "target"},
        "g": {"species": [0], "value": 1.0, "face": "x-"},
        "fstar": {"species": [0, 1, 2], "value": 1.0, "region": "target"},
        "gstar": {"species": [], "value": 0.0, "face": "x+"},
    },
    "prescription": {
        "D0": 1.0, "DC": 0.2, "DN": 0.3, "dose_level": 0.2, "v_C": 0.5,
        "c_T": 1.0, "c_C": 1.0, "c_N": 1.0, "c_DV": 0.0, "c_ad": 0.0, "c_sc": 10.0,
        "species": [0, 1, 2], "dvh_levels": 21,
    },
    "solver": {"tol": 1e-10, "max_iter": 500, "theta": 0.5, "plan_tol": 1e-11, "plan_max_iter": 200},
    "kappa_study": {"kappas": [2.0, 1.5, 1.25, 1.125], "energies": [2.0, 3.0, 4.0, 5.0], "field": "E^2"},
    "validation": {"coercivity_samples": 200, "norm_samples": 3},
    "seed": 0,
    "output": {"dir": "out"},
}

FACES = {"x-": (0, -1), "x+": (0, 1), "y-": (1, -1), "y+": (1, 1), "z-": (2, -1), "z+": (2, 1)}


class ConfigError(CsdaError):
    """The configuration violates an invariant (validation failure)."""


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict
    path: str = None
    base_dir: str = "."
    labels: np.ndarray = field(default=None, repr=False)
    sigma0_map: np.ndarray = field(default=None, repr=False)

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self):
        return int(self.data["seed"])

    @property
    def out_dir(self):
        env = os.environ.get(OUT_ENV)
        d = env if env else self.data["output"]["dir"]
        return d if os.path.isabs(d) else os.path.join(self.base_dir, d)

    def echo(self):
        return copy.deepcopy(self.data)


def default_phantom(dims):
    """Three-region toy phantom: central target, critical slab at x-max, normal elsewhere."""
    nx, ny, nz = dims
    lab = np.full(dims, Region.NORMAL, dtype=np.uint8)
    cx = slice(max(nx // 2 - 1, 0), max(nx // 2 + 1, 1))
    cy = slice(max(ny // 2 - 1, 0), max(ny // 2 + 1, 1))
    lab[cx, cy, :] = Region.TARGET
    if nx >= 3:
        lab[nx - 1, :, :] = Region.CRITICAL
    return lab


def read_labels(path, dims):
    """u8 label volume stored with x varying fastest."""
    raw = np.fromfile(path, dtype=np.uint8)
    nx, ny, nz = dims
    if raw.size != nx * ny * nz:
        raise ConfigError(f"label file has {raw.size} voxels, dims {dims} need {nx * ny * nz}")
    lab = raw.reshape(nz, ny, nx).transpose(2, 1, 0).copy()
    if np.any(lab > max(Region)):
        raise ConfigError("label file contains unknown region codes")
    return lab


def validate_config(d):
    g, grid, phys, sol = d["geometry"], d["grid"], d["physics"], d["solver"]
    if len(g["dims"]) != 3 or any(int(n) < 1 for n in g["dims"]):
        raise ConfigError("geometry.dims must be three positive integers")
    if any(float(h) <= 0 for h in g["spacing"]):
        raise ConfigError("geometry.spacing must be positive")
    kappa, E0, Em = float(phys["kappa"]), float(grid["E0"]), float(grid["Em"])
    if not kappa > 1:
        raise ConfigError("physics.kappa must exceed 1")
    if not 0 < E0 < Em:
        raise ConfigError("need 0 < E0 < Em")
    if not (kappa - 1.0) * E0 > 1.0:
        raise ConfigError(f"ln(kappa*E0 - E0) <= 0 (E0={E0}, kappa={kappa}); "
                          "the drift a(E) would not be negative on I")
    if int(grid["n_energy"]) < 2:
        raise ConfigError("grid.n_energy must be at least 2")
    for k in ("tol", "plan_tol"):
        if not float(sol[k]) > 0:
            raise ConfigError(f"solver.{k} must be positive")
    if not 0 < float(sol["theta"]) <= 1 and sol["theta"] != "auto":
        raise ConfigError("solver.theta must lie in (0, 1] or be 'auto'")
    if int(sol["max_iter"]) < 1:
        raise ConfigError("solver.max_iter must be positive")
    for key in ("g", "gstar"):
        if d["source"][key]["face"] not in FACES:
            raise ConfigError(f"source.{key}.face must be one of {sorted(FACES)}")


def load_config(path=None, overrides=None) -> RunConfig:
    """Read YAML (``path`` may be None for the defaults) and check invariants.

    Raises OSError / yaml.YAMLError for unreadable inputs and ConfigError for
    invariant violations.
    """
    user = {}
    base_dir = "."
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("configuration root must be a mapping")
        base_dir = os.path.dirname(os.path.abspath(path))
    data = _merge(_merge(DEFAULTS, user), overrides)
    validate_config(data)
    dims = tuple(int(n) for n in data["geometry"]["dims"])
    lpath = data["geometry"]["labels"]
    if lpath is None:
        labels = default_phantom(dims)
    else:
        lpath = lpath if os.path.isabs(lpath) else os.path.join(base_dir, lpath)
        labels = read_labels(lpath, dims)
    s0 = data["physics"]["sigma0"]
    smap = None
    if isinstance(s0, str):
        spath = s0 if os.path.isabs(s0) else os.path.join(base_dir, s0)
        raw = np.fromfile(spath, dtype="<f8")
        if raw.size != int(np.prod(dims)):
            raise ConfigError("sigma0 map does not match dims")
        smap = raw.reshape(dims[::-1]).transpose(2, 1, 0).copy()
    elif not float(s0) > 0:
        raise ConfigError("physics.sigma0 must be positive")
    return RunConfig(data, path, base_dir, labels, smap)
