"""Point and mesh file formats: PLY (ascii / binary), OBJ and XYZ."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .geometry import PointCloud, normalize_rows

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

BLUE = (0, 0, 255)
RED = (255, 0, 0)


class ParseError(ValueError):
    """Malformed input file; the message names the line or byte offset."""


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, count_dtype, item_dtype) for lists


def _parse_header(raw: bytes, path) -> tuple[str, list[_Element], int]:
    if not raw.startswith(b"ply"):
        raise ParseError(f"{path}: line 1: missing 'ply' magic")
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: header has no end_header")
    nl = raw.find(b"\n", end)
    body_start = len(raw) if nl < 0 else nl + 1
    lines = raw[:end].decode("ascii", errors="replace").splitlines()
    fmt = None
    elements: list[_Element] = []
    for lineno, line in enumerate(lines, start=1):
        tok = line.split()
        if not tok or tok[0] in ("ply", "comment", "obj_info"):
            continue
        try:
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append(_Element(tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                if tok[1] == "list":
                    elements[-1].props.append((tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]]))
                else:
                    elements[-1].props.append((tok[2], _PLY_TYPES[tok[1]]))
            else:
                raise ParseError(f"{path}: line {lineno}: unknown header keyword {tok[0]!r}")
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"{path}: line {lineno}: bad header line {line!r}") from exc
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, body_start


def _read_ply(path) -> dict[str, dict[str, NDArray]]:
    raw = Path(path).read_bytes()
    fmt, elements, pos = _parse_header(raw, path)
    data: dict[str, dict[str, NDArray]] = {}
    if fmt == "ascii":
        text_lines = raw[pos:].decode("ascii", errors="replace").splitlines()
        first_line = raw[:pos].count(b"\n") + 1
        cursor = 0
        for el in elements:
            cols: dict[str, list] = {p[0]: [] for p in el.props}
            for _ in range(el.count):
                lineno = first_line + cursor
                if cursor >= len(text_lines):
                    raise ParseError(f"{path}: line {lineno}: file ends inside element {el.name!r}")
                tok = text_lines[cursor].split()
                cursor += 1
                t = 0
                try:
                    for p in el.props:
                        if len(p) == 3:
                            cnt = int(tok[t])
                            if len(tok) < t + 1 + cnt:
                                raise IndexError
                            cols[p[0]].append([float(x) for x in tok[t + 1 : t + 1 + cnt]])
                            t += 1 + cnt
                        else:
                            cols[p[0]].append(float(tok[t]))
                            t += 1
                except (IndexError, ValueError) as exc:
                    raise ParseError(f"{path}: line {lineno}: bad {el.name} record") from exc
            data[el.name] = {
                p[0]: np.asarray(cols[p[0]], dtype=object if len(p) == 3 else np.float64) for p in el.props
            }
        return data

    endian = "<" if fmt == "binary_little_endian" else ">"
    for el in elements:
        if all(len(p) == 2 for p in el.props):
            dt = np.dtype([(p[0], endian + p[1]) for p in el.props])
            need = dt.itemsize * el.count
            if pos + need > len(raw):
                raise ParseError(f"{path}: byte offset {pos}: truncated {el.name} data (need {need} bytes, have {len(raw) - pos})")
            arr = np.frombuffer(raw, dtype=dt, count=el.count, offset=pos)
            data[el.name] = {p[0]: arr[p[0]].astype(np.float64) for p in el.props}
            pos += need
        elif len(el.props) == 1 and _fixed_triangles(raw, pos, el, endian):
            name, cdt, idt = el.props[0]
            dt = np.dtype([("n", endian + cdt), ("v", endian + idt, (3,))])
            arr = np.frombuffer(raw, dtype=dt, count=el.count, offset=pos)
            data[el.name] = {name: np.asarray(arr["v"], dtype=np.int64)}
            pos += dt.itemsize * el.count
        else:
            cols = {p[0]: [] for p in el.props}
            for r in range(el.count):
                for p in el.props:
                    if len(p) == 3:
                        cdt = np.dtype(endian + p[1])
                        idt = np.dtype(endian + p[2])
                        if pos + cdt.itemsize > len(raw):
                            raise ParseError(f"{path}: byte offset {pos}: truncated {el.name} record {r}")
                        cnt = int(np.frombuffer(raw, cdt, 1, pos)[0])
                        pos += cdt.itemsize
                        if pos + cnt * idt.itemsize > len(raw):
                            raise ParseError(f"{path}: byte offset {pos}: truncated {el.name} record {r}")
                        cols[p[0]].append(np.frombuffer(raw, idt, cnt, pos).tolist())
                        pos += cnt * idt.itemsize
                    else:
                        dt = np.dtype(endian + p[1])
                        if pos + dt.itemsize > len(raw):
                            raise ParseError(f"{path}: byte offset {pos}: truncated {el.name} record {r}")
                        cols[p[0]].append(float(np.frombuffer(raw, dt, 1, pos)[0]))
                        pos += dt.itemsize
            data[el.name] = {
                k: np.asarray(v, dtype=object) if any(len(p) == 3 and p[0] == k for p in el.props) else np.asarray(v)
                for k, v in cols.items()
            }
    return data


def _fixed_triangles(raw: bytes, pos: int, el: _Element, endian: str) -> bool:
    p = el.props[0]
    if len(p) != 3:
        return False
    dt = np.dtype([("n", endian + p[1]), ("v", endian + p[2], (3,))])
    if pos + dt.itemsize * el.count > len(raw):
        return False
    arr = np.frombuffer(raw, dtype=dt, count=el.count, offset=pos)
    return bool(np.all(arr["n"] == 3))


def _cloud_from_columns(pos: NDArray, nrm: NDArray | None, path) -> PointCloud:
    if len(pos) == 0:
        raise ParseError(f"{path}: no points")
    if nrm is not None:
        lengths = np.linalg.norm(nrm, axis=1)
        if np.any(lengths == 0) or not np.all(np.isfinite(lengths)):
            log.warning("%s: some normals are zero or invalid; normals dropped", path)
            nrm = None
        else:
            nrm = normalize_rows(nrm)
    return PointCloud(pos, nrm)


def _read_xyz(path) -> PointCloud:
    rows = []
    widths = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            try:
                vals = [float(x) for x in s.replace(",", " ").split()]
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: non-numeric value") from exc
            if len(vals) not in (3, 6):
                raise ParseError(f"{path}: line {lineno}: expected 3 or 6 values, got {len(vals)}")
            widths.add(len(vals))
            rows.append(vals if len(vals) == 6 else vals + [np.nan] * 3)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    nrm = None
    if widths == {6}:
        nrm = arr[:, 3:]
    elif widths == {3, 6}:
        log.warning("%s: normals present on only some lines; normals dropped", path)
    return _cloud_from_columns(arr[:, :3], nrm, path)


def _read_obj(path) -> PointCloud:
    v, vn = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tok = line.split()
            if not tok:
                continue
            try:
                if tok[0] == "v":
                    v.append([float(x) for x in tok[1:4]])
                elif tok[0] == "vn":
                    vn.append([float(x) for x in tok[1:4]])
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: bad {tok[0]} record") from exc
            if tok[0] in ("v", "vn") and len((v if tok[0] == "v" else vn)[-1]) != 3:
                raise ParseError(f"{path}: line {lineno}: {tok[0]} needs 3 values")
    nrm = None
    if vn and len(vn) == len(v):
        nrm = np.asarray(vn)
    elif vn:
        log.warning("%s: %d normals for %d vertices; normals dropped", path, len(vn), len(v))
    return _cloud_from_columns(np.asarray(v, dtype=np.float64).reshape(-1, 3), nrm, path)


def read_points(path: str | Path, format: str = "auto") -> PointCloud:
    path = Path(path)
    if format == "auto":
        format = {".ply": "ply", ".obj": "obj"}.get(path.suffix.lower(), "xyz")
    if format == "xyz":
        return _read_xyz(path)
    if format == "obj":
        return _read_obj(path)
    if format != "ply":
        raise ValueError(f"unknown point format {format!r}")
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError(f"{path}: no vertex element")
    vx = data["vertex"]
    try:
        pos = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise ParseError(f"{path}: vertex element lacks {exc}") from exc
    nrm = None
    if all(k in vx for k in ("nx", "ny", "nz")):
        nrm = np.stack([vx["nx"], vx["ny"], vx["nz"]], axis=1).astype(np.float64)
    return _cloud_from_columns(pos, nrm, path)


def read_mesh(path: str | Path) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """Vertices and triangles from a PLY mesh; polygons are fan-triangulated."""
    data = _read_ply(path)
    if "vertex" not in data:
        raise ParseError(f"{path}: no vertex element")
    vx = data["vertex"]
    try:
        verts = np.stack([vx["x"], vx["y"], vx["z"]], axis=1).astype(np.float64)
    except KeyError as exc:
        raise ParseError(f"{path}: vertex element lacks {exc}") from exc
    faces = []
    fe = data.get("face", {})
    key = "vertex_indices" if "vertex_indices" in fe else ("vertex_index" if "vertex_index" in fe else None)
    if key is not None:
        for poly in fe[key]:
            poly = [int(i) for i in poly]
            for t in range(1, len(poly) - 1):
                faces.append((poly[0], poly[t], poly[t + 1]))
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(verts)):
        raise ParseError(f"{path}: face index out of range")
    return verts, f


def _ply_header(n_vertex: int, props: list[tuple[str, str]], n_face: int = 0, binary: bool = False) -> bytes:
    fmt = "binary_little_endian" if binary else "ascii"
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {n_vertex}"]
    lines += [f"property {t} {name}" for name, t in props]
    if n_face:
        lines += [f"element face {n_face}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def write_points_ply(path: str | Path, positions, normals=None, colors=None, binary: bool = False) -> None:
    pos = np.asarray(positions, dtype=np.float64)
    props = [("x", "double"), ("y", "double"), ("z", "double")]
    cols = [pos]
    if normals is not None:
        props += [("nx", "double"), ("ny", "double"), ("nz", "double")]
        cols.append(np.asarray(normals, dtype=np.float64))
    if colors is not None:
        props += [("red", "uchar"), ("green", "uchar"), ("blue", "uchar")]
    with open(path, "wb") as fh:
        fh.write(_ply_header(len(pos), props, binary=binary))
        if binary:
            dt = np.dtype([(name, "<f8" if t == "double" else "u1") for name, t in props])
            rec = np.empty(len(pos), dtype=dt)
            names = [p[0] for p in props]
            flat = np.concatenate(cols, axis=1) if cols else None
            for c, name in enumerate(names[: flat.shape[1]]):
                rec[name] = flat[:, c]
            if colors is not None:
                col = np.asarray(colors, dtype=np.uint8)
                rec["red"], rec["green"], rec["blue"] = col[:, 0], col[:, 1], col[:, 2]
            fh.write(rec.tobytes())
        else:
            flat = np.concatenate(cols, axis=1)
            lines = []
            col = None if colors is None else np.asarray(colors, dtype=np.uint8)
            for i, row in enumerate(flat):
                s = " ".join(repr(float(x)) for x in row)
                if col is not None:
                    s += " %d %d %d" % tuple(col[i])
                lines.append(s)
            fh.write(("\n".join(lines) + "\n").encode("ascii"))


def write_mesh_ply(path: str | Path, vertices, faces) -> None:
    v = np.asarray(vertices, dtype=np.float64)
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(_ply_header(len(v), [("x", "double"), ("y", "double"), ("z", "double")], n_face=len(f)))
        body = [" ".join(repr(float(x)) for x in row) for row in v]
        body += ["3 %d %d %d" % tuple(t) for t in f]
        fh.write(("\n".join(body) + "\n").encode("ascii"))


def write_oriented(path: str | Path, cloud: PointCloud, labels=None, binary: bool = False) -> None:
    """Write positions and normals; with ``labels`` vertices are blue (correct) or red (incorrect)."""
    if cloud.normals is None:
        raise ValueError("cloud has no normals to write")
    colors = None
    if labels is not None:
        lab = np.asarray(labels, dtype=bool)
        if len(lab) != len(cloud):
            raise ValueError("labels length does not match cloud")
        colors = np.where(lab[:, None], np.array(BLUE), np.array(RED)).astype(np.uint8)
    try:
        write_points_ply(path, cloud.positions, cloud.normals, colors, binary=binary)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def read_colors(path: str | Path) -> NDArray[np.uint8] | None:
    vx = _read_ply(path).get("vertex", {})
    if not all(k in vx for k in ("red", "green", "blue")):
        return None
    return np.stack([vx["red"], vx["green"], vx["blue"]], axis=1).astype(np.uint8)


def write_xyz(path: str | Path, cloud: PointCloud, use_gt: bool = False) -> None:
    nrm = cloud.gt_normals if use_gt else cloud.normals
    arr = cloud.positions if nrm is None else np.concatenate([cloud.positions, nrm], axis=1)
    np.savetxt(path, arr, fmt="%.17g")

