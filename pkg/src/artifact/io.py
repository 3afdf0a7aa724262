"""Persistence: CSV tables, JSON documents and the binary grid format.

Binary grid layout (all little-endian):
    8 bytes  magic b"ARTGRID1"
    uint32   format version
    uint32   number of components
    uint32   nx, uint32 ny
    float64  box length L
    float64  time t
    float64  values, C order, shape (components, nx, ny)
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

CSV_VERSION = 1
GRID_MAGIC = b"ARTGRID1"
GRID_VERSION = 1
_HEADER = struct.Struct("<8sIIIIdd")


class FormatError(ValueError):
    pass


def _plain(obj):
    """JSON-ready copy of nested numpy containers."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, columns, rows):
    """Rows are sequences in the order of `columns`; floats use repr for round-tripping."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"# csv_version={CSV_VERSION}"])
        w.writerow(list(columns))
        for row in rows:
            if len(row) != len(columns):
                raise FormatError("row length does not match columns")
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def read_csv(path):
    """(columns, rows as lists of strings)."""
    with Path(path).open(newline="") as fh:
        r = csv.reader(fh)
        head = next(r)
        if head != [f"# csv_version={CSV_VERSION}"]:
            raise FormatError(f"unexpected csv header {head}")
        cols = next(r)
        return cols, [row for row in r]


def trajectory_columns(nvort: int):
    cols = ["time"]
    for i in range(1, nvort + 1):
        cols += [f"z{i}x", f"z{i}y"]
    return cols + ["min_sep"]


def write_trajectories(path, traj):
    """TrajectorySet -> CSV (time, z1x, z1y, ..., min_sep)."""
    z = np.asarray(traj.positions)
    rows = [[float(t)] + [float(c) for c in zi.ravel()] + [float(m)]
            for t, zi, m in zip(traj.times, z, traj.min_separation)]
    write_csv(path, trajectory_columns(z.shape[1]), rows)


def write_grid(path, values, L: float, t: float = 0.0):
    v = np.asarray(values, dtype="<f8")
    if v.ndim == 2:
        v = v[None]
    if v.ndim != 3:
        raise FormatError("grid values must be (nx, ny) or (components, nx, ny)")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, GRID_VERSION, v.shape[0], v.shape[1], v.shape[2],
                              float(L), float(t)))
        fh.write(np.ascontiguousarray(v).tobytes())


def read_grid(path):
    """(values (components, nx, ny), L, t)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError("truncated grid file")
    magic, ver, nc, nx, ny, L, t = _HEADER.unpack_from(raw)
    if magic != GRID_MAGIC or ver != GRID_VERSION:
        raise FormatError("not a grid file of this version")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if data.size != nc * nx * ny:
        raise FormatError("grid payload size mismatch")
    return data.reshape(nc, nx, ny).astype(float), L, t
