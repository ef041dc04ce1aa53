"""ASCII OBJ / ASCII PLY triangle-mesh readers and writers, plus polyline CSV.

Only triangular faces are supported; faces with more vertices are rejected
rather than triangulated. Meshes are cleaned (degenerate faces dropped) on
load.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import GeometryError, TriMesh

__all__ = [
    "read_mesh",
    "write_mesh",
    "read_obj",
    "write_obj",
    "read_ply",
    "write_ply",
    "read_polyline_csv",
    "write_polyline_csv",
]


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *rest = line.split()
        if tag == "v":
            if len(rest) < 3:
                raise GeometryError(f"{path}:{lineno}: bad vertex line")
            verts.append([float(x) for x in rest[:3]])
        elif tag == "f":
            if len(rest) != 3:
                raise GeometryError(f"{path}:{lineno}: only triangular faces supported")
            # "f v", "f v/vt", "f v/vt/vn", "f v//vn" all start with the index.
            faces.append([int(tok.split("/")[0]) - 1 for tok in rest])
        # vn / vt / usemtl / o / g / s are ignored
    if not verts:
        raise GeometryError(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3)).cleaned()


def write_obj(path, mesh: TriMesh) -> None:
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriMesh:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise GeometryError(f"{path}: not a PLY file")
    n_vert = n_face = None
    body_at = None
    for i, line in enumerate(text[1:], start=1):
        toks = line.strip().split()
        if not toks or toks[0] == "comment":
            continue
        if toks[0] == "format":
            if toks[1] != "ascii":
                raise GeometryError(f"{path}: only ASCII PLY supported")
        elif toks[0] == "element":
            if toks[1] == "vertex":
                n_vert = int(toks[2])
            elif toks[1] == "face":
                n_face = int(toks[2])
        elif toks[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None or n_vert is None:
        raise GeometryError(f"{path}: malformed PLY header")
    n_face = n_face or 0

    rows = [l.split() for l in text[body_at:] if l.strip()]
    if len(rows) < n_vert + n_face:
        raise GeometryError(f"{path}: truncated PLY body")
    verts = np.array([[float(x) for x in r[:3]] for r in rows[:n_vert]])
    faces = []
    for r in rows[n_vert : n_vert + n_face]:
        if int(r[0]) != 3:
            raise GeometryError(f"{path}: only triangular faces supported")
        faces.append([int(x) for x in r[1:4]])
    return TriMesh(verts, np.array(faces, dtype=np.int64).reshape(-1, 3)).cleaned()


def write_ply(path, mesh: TriMesh) -> None:
    head = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(head + body) + "\n")


def read_mesh(path) -> TriMesh:
    """Read an ASCII OBJ or PLY mesh, dispatching on the file suffix."""
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise GeometryError(f"unsupported mesh format: {suffix!r}")


def write_mesh(path, mesh: TriMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".ply":
        write_ply(path, mesh)
    else:
        raise GeometryError(f"unsupported mesh format: {suffix!r}")


def read_polyline_csv(path) -> np.ndarray:
    """Read an (N,3) polyline from CSV rows of x,y,z (optional header)."""
    pts = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                pts.append([float(x) for x in row[:3]])
            except ValueError:
                continue  # header row
    if len(pts) < 2:
        raise GeometryError(f"{path}: polyline needs at least 2 vertices")
    return np.array(pts)


def write_polyline_csv(path, points) -> None:
    pts = np.asarray(points, dtype=float)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z"])
        for p in pts:
            w.writerow([f"{c:.17g}" for c in p])
