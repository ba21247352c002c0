"""Artifact export: raw float64 volumes with JSON sidecars, CSV tables, manifest."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile

import numpy as np


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_raw(path, array, meta=None, order="F"):
    """Little-endian float64 dump plus ``path + '.json'`` sidecar.

    ``order='F'`` stores the first axis fastest (x fastest for volumes).
    """
    arr = np.asarray(array, dtype="<f8")
    _atomic_write(path, arr.tobytes(order=order))
    side = dict(meta or {})
    side.update(dtype="float64", endianness="little", shape=list(arr.shape),
                order="first-axis-fastest" if order == "F" else "last-axis-fastest")
    _atomic_write(path + ".json", (json.dumps(side, indent=2, sort_keys=True) + "\n").encode())
    return path


def read_raw(path):
    with open(path + ".json") as fh:
        meta = json.load(fh)
    order = "F" if meta["order"] == "first-axis-fastest" else "C"
    arr = np.fromfile(path, dtype="<f8").reshape(meta["shape"], order=order)
    return arr, meta


def write_csv(path, header, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_manifest(path, manifest: dict):
    """Atomically write the run manifest as JSON."""
    _atomic_write(path, (json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n").encode())
    return path
