"""Legacy VTK output and raw binary density snapshots.

Fields are written as CELL_DATA. A grid with uniform spacing along every
axis is written as STRUCTURED_POINTS; a grid whose layers have different
thicknesses (electrode and channel sub-layers) falls back to
RECTILINEAR_GRID, which carries the explicit z coordinates. Binary files
are big-endian as the legacy format requires.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNAPSHOT_MAGIC = b"VRFBRHO1"
_HEADER = struct.Struct("<8s3i3dqdq")


def _edges(spacing, shape, z_edges=None):
    out = [np.arange(shape[a] + 1) * spacing[a] for a in range(2)]
    out.append(np.arange(shape[2] + 1) * spacing[2] if z_edges is None else np.asarray(z_edges, float))
    return out


def export_vtk(path, fields: dict, spacing, z_edges=None, binary: bool = False, title: str = "vrfb_topopt"):
    """Write cell-centred scalar (shape ``(nx, ny, nz)``) and vector (``(nx, ny, nz, 3)``) fields."""
    if not fields:
        raise ValueError("no fields to export")
    shape = None
    for name, arr in fields.items():
        s = np.shape(arr)[:3]
        if shape is None:
            shape = s
        elif s != shape:
            raise ValueError(f"field {name!r} has shape {np.shape(arr)}, expected {shape}")
    edges = _edges(spacing, shape, z_edges)
    dz = np.diff(edges[2])
    uniform = np.allclose(dz, dz[0], rtol=1e-12, atol=0.0)
    path = Path(path)
    with open(path, "wb") as fh:
        def w(text):
            fh.write(text.encode("ascii"))

        w(f"# vtk DataFile Version 3.0\n{title}\n{'BINARY' if binary else 'ASCII'}\n")
        if uniform:
            w("DATASET STRUCTURED_POINTS\n")
            w(f"DIMENSIONS {shape[0] + 1} {shape[1] + 1} {shape[2] + 1}\n")
            w(f"ORIGIN 0 0 {float(edges[2][0])!r}\n")
            w(f"SPACING {float(spacing[0])!r} {float(spacing[1])!r} {float(dz[0])!r}\n")
        else:
            w("DATASET RECTILINEAR_GRID\n")
            w(f"DIMENSIONS {shape[0] + 1} {shape[1] + 1} {shape[2] + 1}\n")
            for axis, e in zip("XYZ", edges):
                w(f"{axis}_COORDINATES {len(e)} double\n")
                _write_values(fh, e, binary)
        w(f"CELL_DATA {int(np.prod(shape))}\n")
        for name, arr in fields.items():
            arr = np.asarray(arr, dtype=float)
            # VTK orders cells with x fastest
            if arr.ndim == 3:
                w(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                _write_values(fh, arr.transpose(2, 1, 0).ravel(), binary)
            elif arr.ndim == 4 and arr.shape[3] == 3:
                w(f"VECTORS {name} double\n")
                _write_values(fh, arr.transpose(2, 1, 0, 3).reshape(-1, 3).ravel(), binary, per_line=3)
            else:
                raise ValueError(f"field {name!r} must be scalar or 3-vector per cell")
    return path


def _write_values(fh, values, binary, per_line=6):
    values = np.asarray(values, dtype=float).ravel()
    if binary:
        fh.write(values.astype(">f8").tobytes())
        fh.write(b"\n")
        return
    lines = [" ".join(repr(float(v)) for v in values[i:i + per_line]) for i in range(0, len(values), per_line)]
    fh.write(("\n".join(lines) + "\n").encode("ascii"))


@dataclass
class VtkData:
    dataset: str
    shape: tuple
    edges: list
    fields: dict


def read_vtk(path) -> VtkData:
    """Read files produced by :func:`export_vtk` (ASCII or binary)."""
    data = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        end = data.index(b"\n", pos)
        out = data[pos:end].decode("ascii").strip()
        pos = end + 1
        return out

    def values(n):
        nonlocal pos
        if binary:
            arr = np.frombuffer(data, dtype=">f8", count=n, offset=pos).astype(float)
            pos += 8 * n + 1
            return arr
        out = []
        while len(out) < n:
            out.extend(float(t) for t in line().split())
        return np.array(out)

    line()
    line()
    binary = line().upper() == "BINARY"
    dataset = line().split()[1]
    dims = tuple(int(v) - 1 for v in line().split()[1:4])
    if dataset == "STRUCTURED_POINTS":
        origin = [float(v) for v in line().split()[1:]]
        spacing = [float(v) for v in line().split()[1:]]
        edges = [origin[a] + np.arange(dims[a] + 1) * spacing[a] for a in range(3)]
    else:
        edges = []
        for _ in range(3):
            n = int(line().split()[1])
            edges.append(values(n))
    ncell = int(line().split()[1])
    fields = {}
    while pos < len(data):
        head = line()
        if not head:
            continue
        kind, name = head.split()[:2]
        if kind == "SCALARS":
            line()
            fields[name] = values(ncell).reshape(dims[::-1]).transpose(2, 1, 0)
        elif kind == "VECTORS":
            fields[name] = values(3 * ncell).reshape(dims[::-1] + (3,)).transpose(2, 1, 0, 3)
        else:
            raise ValueError(f"unsupported VTK section {kind!r}")
    return VtkData(dataset, dims, edges, fields)


@dataclass
class Snapshot:
    rho: np.ndarray
    spacing: tuple
    iteration: int
    move_limit: float
    worse_count: int


def write_snapshot(path, rho, spacing, iteration: int, move_limit: float, worse_count: int = 0):
    """Raw little-endian float64 density with a fixed binary header.

    Header: magic, dims (3 x int32), spacing (3 x float64), iteration
    (int64), move limit and consecutive-worsening counter (float64, int64)
    as they stood when the iterate was entered. The array follows in C order.
    """
    rho = np.ascontiguousarray(rho, dtype="<f8")
    if rho.ndim != 3:
        raise ValueError("snapshot density must be 3-D")
    header = _HEADER.pack(SNAPSHOT_MAGIC, *rho.shape, *map(float, spacing), int(iteration),
                          float(move_limit), int(worse_count))
    Path(path).write_bytes(header + rho.tobytes())
    return Path(path)


def read_snapshot(path) -> Snapshot:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated snapshot")
    magic, nx, ny, nz, hx, hy, hz, it, ml, wc = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"{path}: not a density snapshot")
    n = nx * ny * nz
    if len(raw) != _HEADER.size + 8 * n:
        raise ValueError(f"{path}: payload size does not match header dims")
    rho = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=n).reshape(nx, ny, nz).copy()
    return Snapshot(rho, (hx, hy, hz), it, ml, wc)
