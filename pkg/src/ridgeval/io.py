"""Point-cloud and polyline file formats.

PLY (ascii 1.0 and binary_little_endian 1.0) and whitespace XYZ are read;
PLY is written as binary little endian with float64 coordinates, and
polylines as OBJ ``v``/``l`` records.
"""

from __future__ import annotations

import os
from typing import Optional, Sequence

import numpy as np

from .cloud import PointCloud
from .errors import InputError

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
HEAT_CLAMP = 3.0  # heatmap saturates at this many rho


def _parse_header(f, path):
    first = f.readline()
    if first.strip() != b"ply":
        raise InputError("%s: not a PLY file (byte 0)" % path)
    fmt = None
    elements = []  # (name, count, [(name, dtype or ('list', count_t, item_t))])
    line_no = 1
    while True:
        raw = f.readline()
        line_no += 1
        if not raw:
            raise InputError("%s: header ends before end_header (line %d)" % (path, line_no))
        parts = raw.decode("ascii", errors="replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        key = parts[0]
        if key == "end_header":
            break
        if key == "format":
            if len(parts) != 3:
                raise InputError("%s: malformed format line %d" % (path, line_no))
            fmt = parts[1]
            if fmt == "binary_big_endian":
                raise InputError("%s: unsupported encoding binary_big_endian" % path)
            if fmt not in ("ascii", "binary_little_endian") or parts[2] != "1.0":
                raise InputError("%s: unsupported encoding %s %s" % (path, fmt, parts[2]))
        elif key == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise InputError("%s: malformed element line %d" % (path, line_no))
            elements.append((parts[1], int(parts[2]), []))
        elif key == "property":
            if not elements:
                raise InputError("%s: property before element (line %d)" % (path, line_no))
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in PLY_TYPES or parts[3] not in PLY_TYPES:
                    raise InputError("%s: unknown property type (line %d)" % (path, line_no))
                elements[-1][2].append((parts[4], ("list", PLY_TYPES[parts[2]], PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in PLY_TYPES:
                elements[-1][2].append((parts[2], PLY_TYPES[parts[1]]))
            else:
                raise InputError("%s: malformed property line %d" % (path, line_no))
        else:
            raise InputError("%s: unexpected header keyword %r (line %d)" % (path, key, line_no))
    if fmt is None:
        raise InputError("%s: missing format line" % path)
    return fmt, elements, line_no


def _vertex_columns(props, path):
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise InputError("%s: vertex element lacks property %s" % (path, req))
    has_n = all(n in names for n in ("nx", "ny", "nz"))
    return names, has_n


def read_ply(path: str) -> PointCloud:
    with open(path, "rb") as f:
        fmt, elements, line_no = _parse_header(f, path)
        offset = f.tell()
        body = f.read()
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if fmt != "ascii" or count:
            # only elements after the vertices may be skipped without parsing
            raise InputError("%s: element %r precedes vertex data" % (path, name))
    if vertex is None:
        raise InputError("%s: no vertex element" % path)
    count, props = vertex
    if any(isinstance(p[1], tuple) for p in props):
        raise InputError("%s: list properties in vertex element are not supported" % path)
    names, has_n = _vertex_columns(props, path)
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        rows = []
        for i in range(count):
            if i >= len(lines):
                raise InputError("%s: expected %d vertices, file ends at line %d" % (path, count, line_no + i + 1))
            tok = lines[i].split()
            if len(tok) != len(props):
                raise InputError("%s: line %d has %d values, expected %d" % (path, line_no + i + 1, len(tok), len(props)))
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise InputError("%s: non-numeric value on line %d" % (path, line_no + i + 1)) from None
        data = np.array(rows, dtype=float).reshape(count, len(props))
        col = {n: data[:, k] for k, n in enumerate(names)}
    else:
        dtype = np.dtype([(n, "<" + t) for n, t in props])
        need = dtype.itemsize * count
        if len(body) < need:
            raise InputError("%s: truncated vertex data at byte %d (need %d)" % (path, offset + len(body), offset + need))
        arr = np.frombuffer(body[:need], dtype=dtype, count=count)
        col = {n: arr[n].astype(float) for n in names}
    points = np.column_stack([col["x"], col["y"], col["z"]])
    normals = np.column_stack([col["nx"], col["ny"], col["nz"]]) if has_n else None
    if points.size == 0:
        raise InputError("%s: empty input" % path)
    return PointCloud(points, normals)


def read_xyz(path: str) -> PointCloud:
    rows = []
    width = None
    with open(path, "r") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if len(tok) not in (3, 6) or (width is not None and len(tok) != width):
                raise InputError("%s: line %d has %d columns, expected 3 or 6 consistently" % (path, line_no, len(tok)))
            width = len(tok)
            try:
                rows.append([float(t) for t in tok])
            except ValueError:
                raise InputError("%s: non-numeric value on line %d" % (path, line_no)) from None
    if not rows:
        raise InputError("%s: empty input" % path)
    data = np.array(rows)
    return PointCloud(data[:, :3], data[:, 3:6] if width == 6 else None)


def read_cloud(path: str) -> PointCloud:
    """Read a PLY or XYZ file (chosen by extension; anything but .ply is XYZ)."""
    if not os.path.exists(path):
        raise InputError("%s: no such file" % path)
    if path.lower().endswith(".ply"):
        return read_ply(path)
    return read_xyz(path)


def write_ply(path: str, cloud: PointCloud, colors: Optional[np.ndarray] = None) -> None:
    n = len(cloud)
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if cloud.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if colors is not None:
        colors = np.asarray(colors)
        if colors.shape != (n, 3):
            raise InputError("colors must have shape (%d, 3)" % n)
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    arr = np.zeros(n, dtype=np.dtype(fields))
    for k, name in enumerate("xyz"):
        arr[name] = cloud.points[:, k]
    if cloud.normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            arr[name] = cloud.normals[:, k]
    if colors is not None:
        for k, name in enumerate(("red", "green", "blue")):
            arr[name] = np.clip(np.rint(colors[:, k]), 0, 255).astype(np.uint8)
    type_name = {"<f8": "double", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", "element vertex %d" % n]
    header += ["property %s %s" % (type_name[t], name) for name, t in fields]
    header.append("end_header")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            f.write(arr.tobytes())
    except OSError as exc:
        raise InputError("%s: cannot write (%s)" % (path, exc.strerror)) from exc


def write_xyz(path: str, cloud: PointCloud) -> None:
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    try:
        np.savetxt(path, data, fmt="%.17g")
    except OSError as exc:
        raise InputError("%s: cannot write (%s)" % (path, exc.strerror)) from exc


def write_cloud(path: str, cloud: PointCloud, colors: Optional[np.ndarray] = None) -> None:
    """Write PLY (with optional uchar RGB) or, for non-.ply paths without colors, XYZ."""
    if path.lower().endswith(".ply") or colors is not None:
        write_ply(path, cloud, colors)
    else:
        write_xyz(path, cloud)


def heatmap_colors(distance: np.ndarray, rho: float, clamp: float = HEAT_CLAMP) -> np.ndarray:
    """Red at 0, blue from ``clamp * rho`` on (infinite distances included), linear between."""
    d = np.asarray(distance, dtype=float)
    t = np.clip(np.where(np.isfinite(d), d, np.inf) / (clamp * rho), 0.0, 1.0)
    rgb = np.column_stack([255 * (1 - t), np.zeros_like(t), 255 * t])
    return np.rint(rgb).astype(np.uint8)


def write_polylines(path: str, polylines: Sequence) -> None:
    """OBJ with one ``v`` per node and one ``l`` record (1-based) per polyline.

    Accepts polyline objects with ``positions`` or plain (M, 3) arrays.
    """
    lines = []
    records = []
    base = 1
    for p in polylines:
        pos = np.asarray(getattr(p, "positions", p), dtype=float).reshape(-1, 3)
        lines += ["v %.17g %.17g %.17g" % tuple(v) for v in pos]
        records.append("l " + " ".join(str(base + i) for i in range(len(pos))))
        base += len(pos)
    try:
        with open(path, "w") as f:
            f.write("\n".join(lines + records) + "\n")
    except OSError as exc:
        raise InputError("%s: cannot write (%s)" % (path, exc.strerror)) from exc


def read_polylines(path: str) -> list[np.ndarray]:
    """Node arrays of every ``l`` record of an OBJ file."""
    verts = []
    out = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(t) for t in tok[1:4]])
                elif tok[0] == "l":
                    idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                    out.append(np.array([verts[i] for i in idx]))
            except (ValueError, IndexError):
                raise InputError("%s: malformed record on line %d" % (path, line_no)) from None
    return out
