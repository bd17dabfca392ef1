"""Minimal PLY vertex reader/writer (binary little-endian or ascii input)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NUMPY_TO_PLY = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
                 "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


def write_vertices(path, vertices: np.ndarray) -> None:
    """Write a structured array as the ``vertex`` element of a binary PLY."""
    dtype = vertices.dtype
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(vertices)}"]
    for name in dtype.names:
        code = dtype[name].str[1:]
        lines.append(f"property {_NUMPY_TO_PLY[code]} {name}")
    lines.append("end_header")
    le = np.dtype([(n, "<" + dtype[n].str[1:]) for n in dtype.names])
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(vertices.astype(le).tobytes())


def read_vertices(path) -> np.ndarray:
    """Read the ``vertex`` element of a PLY file into a structured array."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii").splitlines()
    fmt = None
    elements = []
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if not elements or elements[0][0] != "vertex":
        raise ValueError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    if fmt == "ascii":
        rows = data[body_start:].decode("ascii").split("\n")[:count]
        arr = np.zeros(count, dtype=[(n, t) for n, t in props])
        for i, row in enumerate(rows):
            for (n, _), v in zip(props, row.split()):
                arr[n][i] = float(v)
        return arr
    endian = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if endian is None:
        raise ValueError(f"{path}: unknown PLY format {fmt}")
    dtype = np.dtype([(n, endian + t) for n, t in props])
    return np.frombuffer(data, dtype=dtype, count=count, offset=body_start).copy()


def write_point_cloud(path, xyz, rgb=None) -> None:
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    dtype = [("x", "f8"), ("y", "f8"), ("z", "f8"), ("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(len(xyz), dtype=dtype)
    arr["x"], arr["y"], arr["z"] = xyz.T
    rgb = np.full((len(xyz), 3), 128) if rgb is None else np.asarray(rgb).reshape(-1, 3)
    arr["red"], arr["green"], arr["blue"] = rgb.T
    write_vertices(path, arr)


def read_point_cloud(path) -> np.ndarray:
    v = read_vertices(path)
    return np.stack([v["x"], v["y"], v["z"]], axis=1).astype(float)
