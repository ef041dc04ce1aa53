"""Template-to-patient registration primitives.

Rigid initialization (centroid alignment plus ICP), coherent-point-drift
nonrigid registration fit by expectation-maximization, Gaussian displacement
fields, normalized landmark transfer, proximity-blended joint deformation,
and the parallel-plane protocol for muscle scan cross sections.

Point clouds are (N, 3) arrays in mm. All operations are pure given their
inputs; registrations of distinct anatomies may run concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .geometry import Plane, TriMesh, cross_section_area, offset_plane

__all__ = [
    "RegistrationError",
    "RigidTransform",
    "DeformationField",
    "ScsResult",
    "rigid_init",
    "cpd_register",
    "apply_field",
    "transfer_landmark",
    "tmj_weights",
    "tmj_blend",
    "similarity_fit",
    "extract_scs",
]


class RegistrationError(ValueError):
    pass


def _as_cloud(points, name: str = "cloud") -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise RegistrationError(f"{name} must be a non-empty (N, 3) array")
    return pts


def _cloud_diagonal(points: np.ndarray) -> float:
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion x -> R x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).ravel()
        if r.shape != (3, 3) or t.shape != (3,):
            raise RegistrationError("rotation must be 3x3 and translation a 3-vector")
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise RegistrationError("rotation is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise RegistrationError("rotation must be proper (det +1)")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        return _as_cloud(points) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


def _kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Least-squares proper rotation + translation mapping source onto target."""
    c_s = source.mean(axis=0)
    c_t = target.mean(axis=0)
    h = (source - c_s).T @ (target - c_t)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, c_t - r @ c_s)


def _require_non_collinear(points: np.ndarray, name: str) -> None:
    if len(points) < 3:
        raise RegistrationError(f"{name} needs at least 3 points")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise RegistrationError(f"{name} is collinear or degenerate")


def _icp(src, dst, tree, initial: RigidTransform, max_iters: int, tol: float):
    transform = initial
    mse = mse_prev = math.inf
    for _ in range(max_iters):
        moved = transform.apply(src)
        dists, idx = tree.query(moved)
        transform = _kabsch(src, dst[idx])
        mse = float(np.mean(dists**2))
        if abs(mse_prev - mse) < tol:
            break
        mse_prev = mse
    return transform, mse


def _principal_axes(points: np.ndarray) -> np.ndarray:
    centered = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    return vt.T  # columns ordered by decreasing spread


def rigid_init(
    template, target, max_iters: int = 50, tol: float = 1e-10
) -> RigidTransform:
    """Centroid alignment followed by ICP (nearest-vertex matches, SVD step).

    ICP alone is local, so it restarts from a small set of initial rotations
    (identity plus the four proper principal-axis alignments) and keeps the
    lowest-residual result; this recovers arbitrary rigid motions whenever
    the cloud has distinct principal directions. Each start iterates until
    the change in mean squared residual falls below ``tol`` or ``max_iters``
    is reached. Both clouds must contain at least three non-collinear
    points; the result is always a proper rotation.
    """
    src = _as_cloud(template, "template")
    dst = _as_cloud(target, "target")
    _require_non_collinear(src, "template")
    _require_non_collinear(dst, "target")

    c_src, c_dst = src.mean(axis=0), dst.mean(axis=0)
    starts = [RigidTransform(np.eye(3), c_dst - c_src)]
    u_src = _principal_axes(src)
    u_dst = _principal_axes(dst)
    for signs in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
        r0 = u_dst @ np.diag(signs) @ u_src.T
        if np.linalg.det(r0) < 0:
            r0 = u_dst @ np.diag(np.negative(signs)) @ u_src.T
        starts.append(RigidTransform(r0, c_dst - r0 @ c_src))

    tree = cKDTree(dst)
    best, best_mse = None, math.inf
    for initial in starts:
        transform, mse = _icp(src, dst, tree, initial, max_iters, tol)
        if mse < best_mse:
            best, best_mse = transform, mse
    return best


@dataclass(eq=False)
class DeformationField:
    """Gaussian displacement field anchored at template control points."""

    control_points: np.ndarray  # (M, 3)
    coefficients: np.ndarray  # (M, 3)
    beta: float
    converged: bool = True
    sigma2: float | None = None
    objective_trace: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.control_points = _as_cloud(self.control_points, "control_points")
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != self.control_points.shape:
            raise RegistrationError("one displacement coefficient per control point required")
        if not self.beta > 0.0:
            raise RegistrationError("kernel width beta must be positive")


def _gauss_kernel(a: np.ndarray, b: np.ndarray, beta: float) -> np.ndarray:
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * beta**2))


def apply_field(field_: DeformationField, x) -> np.ndarray:
    """Warp point(s): x + sum_m G_beta(x, y_m) w_m."""
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts2 = _as_cloud(pts)
    warped = pts2 + _gauss_kernel(pts2, field_.control_points, field_.beta) @ field_.coefficients
    return warped[0] if single else warped


def cpd_register(
    template,
    target,
    beta: float | None = None,
    lam: float = 2.0,
    w_outlier: float = 0.1,
    max_iters: int = 150,
    tol: float = 1e-6,
) -> DeformationField:
    """Nonrigid coherent point drift of the template onto the target.

    The template points act as Gaussian-mixture centroids warped by a
    Gaussian displacement field of width ``beta`` (default: 10% of the
    template bounding-box diagonal). Each EM iteration computes posterior
    correspondences with a uniform outlier component of weight
    ``w_outlier``, re-solves the motion-coherence-regularized system for the
    displacement coefficients, and updates the mixture variance. The
    reported objective is the expected weighted mismatch plus the smoothness
    penalty at its current annealed weight, lam * sigma^2 * tr(W^T G W) —
    exactly what the M-step minimizes, so it is nonincreasing. Iteration
    stops when its relative change drops below ``tol``; hitting
    ``max_iters`` first returns the field flagged as not converged.
    """
    y = _as_cloud(template, "template")
    x = _as_cloud(target, "target")
    if not 0.0 <= w_outlier < 1.0:
        raise RegistrationError("outlier weight must be in [0, 1)")
    if not lam > 0.0:
        raise RegistrationError("regularization weight lam must be positive")
    if beta is None:
        beta = 0.1 * _cloud_diagonal(y)
    if not beta > 0.0:
        raise RegistrationError("kernel width beta must be positive")

    m, n = len(y), len(x)
    g = _gauss_kernel(y, y, beta)
    w = np.zeros_like(y)
    sigma2 = float(cdist(y, x, "sqeuclidean").sum() / (3.0 * m * n))
    sigma2_floor = max(1e-12, 1e-12 * _cloud_diagonal(np.vstack([y, x])) ** 2)

    objective_trace = []
    converged = False
    e_prev = math.inf
    for _ in range(max_iters):
        t = y + g @ w
        d2 = cdist(t, x, "sqeuclidean")
        c = (2.0 * math.pi * sigma2) ** 1.5 * w_outlier / (1.0 - w_outlier) * m / n
        num = np.exp(-d2 / (2.0 * sigma2))
        p = num / (num.sum(axis=0, keepdims=True) + c)

        e_val = float((p * d2).sum() + lam * sigma2 * np.trace(w.T @ g @ w))
        objective_trace.append(e_val)
        if abs(e_prev - e_val) < tol * max(1.0, abs(e_val)):
            converged = True
            break
        e_prev = e_val

        p1 = p.sum(axis=1)
        n_p = float(p1.sum())
        if n_p < 1e-12:
            break  # all mass assigned to the outlier component
        a = p1[:, None] * g + lam * sigma2 * np.eye(m)
        w = np.linalg.solve(a, p @ x - p1[:, None] * y)

        t = y + g @ w
        pt1 = p.sum(axis=0)
        xpx = float(pt1 @ np.einsum("ij,ij->i", x, x))
        trpxt = float(np.sum((p @ x) * t))
        tpt = float(p1 @ np.einsum("ij,ij->i", t, t))
        sigma2 = max((xpx - 2.0 * trpxt + tpt) / (3.0 * n_p), sigma2_floor)

    return DeformationField(
        control_points=y,
        coefficients=w,
        beta=beta,
        converged=converged,
        sigma2=sigma2,
        objective_trace=tuple(objective_trace),
    )


def transfer_landmark(p, field_: DeformationField, beta: float | None = None) -> np.ndarray:
    """Move a landmark by the normalized Gaussian average of control displacements.

    Weights G_beta(p, y_m) are normalized to sum to one, so a uniform control
    displacement moves the landmark by exactly that displacement. ``beta``
    defaults to the field's own kernel width. Raises when every weight
    underflows to zero (landmark outside the influence region).
    """
    pt = np.asarray(p, dtype=float).ravel()
    if pt.shape != (3,):
        raise RegistrationError("landmark must be a 3-vector")
    b = field_.beta if beta is None else beta
    d2 = np.sum((field_.control_points - pt) ** 2, axis=1)
    # Shifted exponentials keep the nearest control at weight 1, so a single
    # control point works at any distance; non-finite distances fall through
    # to the error branch below.
    with np.errstate(invalid="ignore"):
        weights = np.exp(-(d2 - d2.min()) / (2.0 * b**2))
    total = weights.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise RegistrationError("landmark outside influence region: all weights underflow")
    displacements = apply_field(field_, field_.control_points) - field_.control_points
    return pt + (weights / total) @ displacements


def _knn_mean_distance(x: np.ndarray, refs: np.ndarray, k: int) -> float:
    if len(refs) < k:
        raise RegistrationError(f"reference cloud has {len(refs)} points, needs >= {k}")
    d, _ = cKDTree(refs).query(x, k=k)
    return float(np.mean(d))


def tmj_weights(
    x,
    cond_refs,
    fossa_refs,
    q: float,
    eps: float = 1e-8,
    k_nn: int = 20,
) -> tuple:
    """Inverse-distance blend weights (w_cond, w_fossa); they sum to 1 exactly.

    Distances are the mean over the ``k_nn`` nearest reference points,
    stabilized by ``eps`` and decayed with exponent ``q``.
    """
    if not q > 0.0:
        raise RegistrationError("decay exponent q must be positive")
    pt = np.asarray(x, dtype=float).ravel()
    d_cond = _knn_mean_distance(pt, _as_cloud(cond_refs, "cond_refs"), k_nn)
    d_fossa = _knn_mean_distance(pt, _as_cloud(fossa_refs, "fossa_refs"), k_nn)
    a = (d_cond + eps) ** (-q)
    b = (d_fossa + eps) ** (-q)
    w_cond = a / (a + b)
    return w_cond, 1.0 - w_cond


def tmj_blend(
    x,
    field_cond: DeformationField,
    field_fossa: DeformationField,
    cond_refs,
    fossa_refs,
    q: float,
    eps: float = 1e-8,
    k_nn: int = 20,
) -> np.ndarray:
    """Blend the condyle- and fossa-derived displacements at a joint point."""
    pt = np.asarray(x, dtype=float).ravel()
    w_cond, w_fossa = tmj_weights(pt, cond_refs, fossa_refs, q, eps, k_nn)
    delta_cond = apply_field(field_cond, pt) - pt
    delta_fossa = apply_field(field_fossa, pt) - pt
    return pt + w_cond * delta_cond + w_fossa * delta_fossa


def similarity_fit(source, target) -> tuple:
    """Least-squares similarity transform (scale, rotation, translation).

    Maps the source landmark set onto the target; used as the fallback when
    an anatomy is outside the imaged field of view and must follow a
    related body instead.
    """
    src = _as_cloud(source, "source")
    dst = _as_cloud(target, "target")
    if len(src) != len(dst):
        raise RegistrationError("similarity fit needs paired landmark sets")
    _require_non_collinear(src, "source")
    c_s, c_t = src.mean(axis=0), dst.mean(axis=0)
    a = src - c_s
    b = dst - c_t
    h = a.T @ b
    u, sv, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    var_src = float(np.einsum("ij,ij->", a, a))
    scale = float((sv[0] + sv[1] + d * sv[2]) / var_src)
    t = c_t - scale * r @ c_s
    return scale, r, t


@dataclass(frozen=True)
class ScsResult:
    """Largest scan cross section over the parallel-plane protocol."""

    area_cm2: float
    offset_mm: float
    areas: dict  # offset -> area, all 11 planes


def extract_scs(mesh: TriMesh, ref_plane: Plane, offsets=None) -> ScsResult:
    """Max cross-section area over the reference plane and its 10 neighbors.

    The neighbors sit at +/-1..5 mm along the plane normal by default; the
    largest section is retained together with its offset.
    """
    if offsets is None:
        offsets = [float(k) for k in range(-5, 6)]
    areas = {
        float(off): cross_section_area(mesh, offset_plane(ref_plane, off)) for off in offsets
    }
    best = max(areas, key=lambda off: (areas[off], -abs(off)))
    return ScsResult(area_cm2=areas[best], offset_mm=best, areas=areas)
