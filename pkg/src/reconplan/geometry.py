"""Primitive 3-D geometry: planes, polylines, triangle meshes.

All coordinates are in millimetres. Points are plain ``(3,)`` float arrays;
polylines are ``(N, 3)`` arrays of ordered vertices. Everything here is pure
and safe to call concurrently on shared, immutable meshes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GeometryError",
    "OpenMeshError",
    "Plane",
    "TriMesh",
    "as_point",
    "perpendicular_deviation",
    "rdp_simplify",
    "rotation_about_axis",
    "rotate_plane",
    "offset_plane",
    "project_to_surface",
    "cross_section_area",
]

_ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (degenerate segment, bad mesh indices, ...)."""


class OpenMeshError(GeometryError):
    """Cross sections of non-watertight meshes are unreliable and refused."""


def as_point(p) -> np.ndarray:
    """Coerce to a finite (3,) float64 point."""
    a = np.asarray(p, dtype=float)
    if a.shape != (3,):
        raise GeometryError(f"expected a 3-vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise GeometryError("point has non-finite components")
    return a


@dataclass(frozen=True, eq=False)
class Plane:
    """Oriented plane with a local in-plane frame.

    ``normal``, ``roll_axis`` and ``pitch_axis`` must be mutually orthonormal;
    rotations of the plane are expressed about the two in-plane axes.
    """

    origin: np.ndarray
    normal: np.ndarray
    roll_axis: np.ndarray
    pitch_axis: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", as_point(self.origin))
        for name in ("normal", "roll_axis", "pitch_axis"):
            object.__setattr__(self, name, as_point(getattr(self, name)))
        axes = np.stack([self.normal, self.roll_axis, self.pitch_axis])
        gram = axes @ axes.T
        if not np.allclose(gram, np.eye(3), atol=_ORTHO_TOL):
            raise GeometryError("plane axes are not orthonormal")

    @classmethod
    def from_normal(cls, origin, normal) -> "Plane":
        """Build a plane with an arbitrary (but deterministic) in-plane frame."""
        n = as_point(normal)
        norm = np.linalg.norm(n)
        if norm == 0.0:
            raise GeometryError("zero normal")
        n = n / norm
        # Pick the world axis least aligned with the normal to seed the frame.
        seed = np.zeros(3)
        seed[int(np.argmin(np.abs(n)))] = 1.0
        roll = np.cross(seed, n)
        roll /= np.linalg.norm(roll)
        pitch = np.cross(n, roll)
        return cls(as_point(origin), n, roll, pitch)

    def signed_distance(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - self.origin) @ self.normal


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh: ``vertices`` (N,3) float, ``faces`` (M,3) int.

    Construction validates face indices; use :meth:`cleaned` after loading
    files to drop zero-area faces.
    """

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise GeometryError(f"vertices must be (N,3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise GeometryError(f"faces must be (M,3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise GeometryError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    def cleaned(self) -> "TriMesh":
        """Return a copy without degenerate (zero-area) faces."""
        if not len(self.faces):
            return self
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        return TriMesh(self.vertices, self.faces[areas > 0.0])

    def is_watertight(self) -> bool:
        """True if every edge is shared by exactly two faces."""
        if not len(self.faces):
            return False
        edges = np.concatenate(
            [self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]]
        )
        edges = np.sort(edges, axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return bool(np.all(counts == 2))


def perpendicular_deviation(pk, p1, pn) -> float:
    """Perpendicular distance of ``pk`` from the line through ``p1`` and ``pn``.

    Computed as ||(pn - p1) x (p1 - pk)|| / ||pn - p1||; raises on a
    degenerate segment (p1 == pn).
    """
    pk, p1, pn = as_point(pk), as_point(p1), as_point(pn)
    seg = pn - p1
    seg_len = np.linalg.norm(seg)
    if seg_len == 0.0:
        raise GeometryError("degenerate segment: p1 == pn")
    return float(np.linalg.norm(np.cross(seg, p1 - pk)) / seg_len)


def rdp_simplify(contour, tolerance: float) -> np.ndarray:
    """Simplify a polyline, returning the sorted indices of retained vertices.

    Recursively splits at the vertex of largest perpendicular deviation
    whenever that deviation exceeds ``tolerance`` (mm). Ties go to the lowest
    index. Endpoints are always retained.
    """
    pts = np.asarray(contour, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise GeometryError("contour must be an (N>=2, 3) array")
    if not tolerance > 0.0:
        raise GeometryError("tolerance must be positive")

    keep = {0, len(pts) - 1}
    stack = [(0, len(pts) - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi - lo < 2:
            continue
        seg = pts[hi] - pts[lo]
        seg_len = np.linalg.norm(seg)
        interior = pts[lo + 1 : hi]
        if seg_len == 0.0:
            dev = np.linalg.norm(interior - pts[lo], axis=1)
        else:
            dev = np.linalg.norm(np.cross(seg, pts[lo] - interior), axis=1) / seg_len
        split = int(np.argmax(dev))  # argmax takes the first (lowest-index) max
        if dev[split] > tolerance:
            mid = lo + 1 + split
            keep.add(mid)
            stack.append((lo, mid))
            stack.append((mid, hi))
    return np.array(sorted(keep), dtype=np.int64)


def rotation_about_axis(axis, angle_deg: float) -> np.ndarray:
    """Right-hand-rule rotation matrix about a unit ``axis`` (Rodrigues)."""
    u = as_point(axis)
    u = u / np.linalg.norm(u)
    th = np.deg2rad(angle_deg)
    k = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.eye(3) + np.sin(th) * k + (1.0 - np.cos(th)) * (k @ k)


def rotate_plane(plane: Plane, roll_deg: float, pitch_deg: float) -> Plane:
    """Rotate a plane about its own roll axis, then about its (moved) pitch axis.

    Both rotations follow the right-hand rule and keep the origin fixed. The
    intrinsic roll-then-pitch composition equals the fixed-axis matrix product
    R(roll_axis, roll) @ R(pitch_axis, pitch) applied to the original frame.
    """
    m = rotation_about_axis(plane.roll_axis, roll_deg) @ rotation_about_axis(
        plane.pitch_axis, pitch_deg
    )
    normal = m @ plane.normal
    roll = m @ plane.roll_axis
    pitch = m @ plane.pitch_axis
    # Re-orthonormalize to keep long rotation chains well conditioned.
    normal /= np.linalg.norm(normal)
    roll -= (roll @ normal) * normal
    roll /= np.linalg.norm(roll)
    pitch = np.cross(normal, roll) * np.sign(np.cross(normal, roll) @ pitch)
    return Plane(plane.origin, normal, roll, pitch)


def offset_plane(plane: Plane, distance: float) -> Plane:
    """Translate the plane by ``distance`` (mm) along its unit normal."""
    return Plane(plane.origin + distance * plane.normal, plane.normal,
                 plane.roll_axis, plane.pitch_axis)


def project_to_surface(p, mesh: TriMesh) -> int:
    """Index of the mesh vertex closest to ``p`` (ties: lowest index)."""
    if not len(mesh.vertices):
        raise GeometryError("empty mesh")
    d2 = np.einsum("ij,ij->i", mesh.vertices - as_point(p), mesh.vertices - as_point(p))
    return int(np.argmin(d2))


def cross_section_area(mesh: TriMesh, plane: Plane) -> float:
    """Area (cm^2) of the planar region enclosed by the mesh/plane intersection.

    Requires a watertight mesh with consistent winding; the signed
    contributions of the oriented intersection segments then sum to the
    enclosed area, with multiple disjoint loops added and interior holes
    subtracted. Returns 0.0 when the plane misses the mesh.
    """
    if not mesh.is_watertight():
        raise OpenMeshError("unreliable-section: mesh is not watertight")

    v = mesh.vertices - plane.origin
    s = v @ plane.normal
    # Nudge on-plane vertices to the positive side so every crossing is a
    # clean sign change (symbolic perturbation).
    eps = 1e-12 * max(1.0, float(np.max(np.abs(s))))
    s = np.where(s == 0.0, eps, s)

    f = mesh.faces
    sf = s[f]
    crossing = ~(np.all(sf > 0, axis=1) | np.all(sf < 0, axis=1))
    if not np.any(crossing):
        return 0.0

    total = 0.0
    n_hat = plane.normal
    for tri in f[crossing]:
        pts = []
        for k in range(3):
            i, j = tri[k], tri[(k + 1) % 3]
            si, sj = s[i], s[j]
            if (si > 0) != (sj > 0):
                t = si / (si - sj)
                pts.append(v[i] + t * (v[j] - v[i]))
        if len(pts) == 2:
            a, b = pts
            # Orient each segment along n_face x n_plane so every loop winds
            # consistently with the mesh; holes come out counter-oriented and
            # subtract from the signed sum.
            n_face = np.cross(v[tri[1]] - v[tri[0]], v[tri[2]] - v[tri[0]])
            if (b - a) @ np.cross(n_face, n_hat) < 0.0:
                a, b = b, a
            total += 0.5 * float(np.cross(a, b) @ n_hat)
    return abs(total) / 100.0  # mm^2 -> cm^2
