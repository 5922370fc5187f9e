"""Reconstruction and pose metrics.

Surface metrics work on area-weighted point samples of triangle meshes.
Each nearest-neighbour metric has a k-d tree path and a brute-force path
that must agree to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, EmptyMesh, NoVisibleSamples, ZeroUnion
from .sdf import DEFAULT_BOUNDS, SdfGrid, TriangleMesh, sample
from .se3 import Intrinsics, Pose, project_points, rotation_angle


@dataclass(frozen=True)
class ShapeMetrics:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    fscore: float


@dataclass(frozen=True)
class PoseMetrics:
    pixel_error: float
    rotation_error: float     # degrees
    translation_error: float


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray
    normals: np.ndarray


# ---------------------------------------------------------------------------
# sampling and nearest neighbours
# ---------------------------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> SurfaceSamples:
    """Uniform-by-area samples with interpolated (or face) normals."""
    if len(mesh.triangles) == 0 or len(mesh.vertices) == 0:
        raise EmptyMesh("mesh has no triangles")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise EmptyMesh("mesh has zero area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    corners = mesh.triangles[tri]
    pts = np.einsum("nk,nkd->nd", w, mesh.vertices[corners])
    if mesh.normals is not None:
        nrm = np.einsum("nk,nkd->nd", w, mesh.normals[corners])
    else:
        nrm = mesh.face_normals()[tri]
    nrm /= np.maximum(np.linalg.norm(nrm, axis=1, keepdims=True), 1e-300)
    return SurfaceSamples(pts, nrm)


def nearest(src: np.ndarray, dst: np.ndarray, method: str = "kdtree"):
    """Distance and index of the nearest ``dst`` point for every ``src`` point."""
    if method == "kdtree":
        d, i = cKDTree(dst).query(src)
        return np.asarray(d, dtype=float), np.asarray(i)
    if method == "brute":
        dist = np.empty(len(src))
        idx = np.empty(len(src), dtype=np.intp)
        for start in range(0, len(src), 256):
            chunk = src[start:start + 256]
            d2 = np.sum((chunk[:, None, :] - dst[None, :, :]) ** 2, axis=2)
            j = np.argmin(d2, axis=1)
            idx[start:start + 256] = j
            dist[start:start + 256] = np.linalg.norm(chunk - dst[j], axis=1)
        return dist, idx
    raise ValueError(f"unknown method {method!r}")


def _samples(mesh_or_samples, n, seed) -> SurfaceSamples:
    if isinstance(mesh_or_samples, SurfaceSamples):
        if len(mesh_or_samples.points) == 0:
            raise EmptyMesh("no surface samples")
        return mesh_or_samples
    return sample_surface(mesh_or_samples, n, seed)


# ---------------------------------------------------------------------------
# surface metrics
# ---------------------------------------------------------------------------

def chamfer_l1(pred, gt, n_samples: int = 10_000, seed: int = 0, method: str = "kdtree") -> float:
    """``(accuracy + completeness) / 2`` of mean nearest-neighbour distances.

    ``pred`` and ``gt`` are meshes or precomputed :class:`SurfaceSamples`.
    """
    a = _samples(pred, n_samples, seed)
    b = _samples(gt, n_samples, seed + 1)
    acc, _ = nearest(a.points, b.points, method)
    comp, _ = nearest(b.points, a.points, method)
    return float(0.5 * (acc.mean() + comp.mean()))


def normal_consistency(pred, gt, n_samples: int = 10_000, seed: int = 0, method: str = "kdtree") -> float:
    a = _samples(pred, n_samples, seed)
    b = _samples(gt, n_samples, seed + 1)
    _, ia = nearest(a.points, b.points, method)
    _, ib = nearest(b.points, a.points, method)
    cos_a = np.abs(np.sum(a.normals * b.normals[ia], axis=1))
    cos_b = np.abs(np.sum(b.normals * a.normals[ib], axis=1))
    return float(0.5 * (cos_a.mean() + cos_b.mean()))


def default_fscore_threshold(gt) -> float:
    pts = gt.points if isinstance(gt, SurfaceSamples) else gt.vertices
    return 0.01 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))


def fscore(pred, gt, tau: float | None = None, n_samples: int = 10_000, seed: int = 0, method: str = "kdtree") -> float:
    """Harmonic mean of precision and recall at distance ``tau``.

    ``tau`` defaults to 1% of the ground-truth bounding-box diagonal.
    """
    if tau is None:
        tau = default_fscore_threshold(gt)
    a = _samples(pred, n_samples, seed)
    b = _samples(gt, n_samples, seed + 1)
    da, _ = nearest(a.points, b.points, method)
    db, _ = nearest(b.points, a.points, method)
    precision = float(np.mean(da < tau))
    recall = float(np.mean(db < tau))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# volumetric IoU
# ---------------------------------------------------------------------------

def winding_number(mesh: TriangleMesh, points: np.ndarray) -> np.ndarray:
    """Generalised winding number (solid-angle sum) of ``points``."""
    out = np.zeros(len(points))
    tris = mesh.vertices[mesh.triangles]
    for start in range(0, len(points), 512):
        p = points[start:start + 512]
        a = tris[None, :, 0] - p[:, None]
        b = tris[None, :, 1] - p[:, None]
        c = tris[None, :, 2] - p[:, None]
        la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
        det = np.einsum("ptd,ptd->pt", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("ptd,ptd->pt", a, b) * lc
               + np.einsum("ptd,ptd->pt", b, c) * la + np.einsum("ptd,ptd->pt", c, a) * lb)
        out[start:start + 512] = np.sum(2 * np.arctan2(det, den), axis=1) / (4 * np.pi)
    return out


def occupancy(shape, points: np.ndarray) -> np.ndarray:
    """Inside test for an :class:`SdfGrid`, a mesh, or a callable SDF."""
    if isinstance(shape, SdfGrid):
        return sample(shape, points) < 0
    if isinstance(shape, TriangleMesh):
        return winding_number(shape, points) > 0.5
    if callable(shape):
        return np.asarray(shape(points)) < 0
    raise TypeError(f"cannot evaluate occupancy of {type(shape).__name__}")


def volumetric_iou(pred, gt, n_points: int = 100_000, seed: int = 0, bounds=DEFAULT_BOUNDS) -> float:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(bounds[0], bounds[1], (n_points, 3))
    a = occupancy(pred, pts)
    b = occupancy(gt, pts)
    union = np.count_nonzero(a | b)
    if union == 0:
        raise ZeroUnion("both shapes are empty in the evaluation box")
    return np.count_nonzero(a & b) / union


# ---------------------------------------------------------------------------
# pose metrics
# ---------------------------------------------------------------------------

def visible_projections(pred: Pose, gt: Pose, K: Intrinsics, samples):
    """Pixel positions of ``samples`` under both poses, keeping only samples
    in front of both cameras and inside both images."""
    pts = np.asarray(samples, dtype=float).reshape(-1, 3)
    uv_p, z_p = project_points(pts, pred, K)
    uv_g, z_g = project_points(pts, gt, K)

    def inside(uv, z):
        return (z > 1e-9) & (uv[:, 0] >= 0) & (uv[:, 0] <= K.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= K.height - 1)

    keep = inside(uv_p, z_p) & inside(uv_g, z_g)
    return uv_p[keep], uv_g[keep], int(len(pts) - keep.sum())


def pixel_error(pred: Pose, gt: Pose, K: Intrinsics, samples) -> float:
    """Mean image distance between projections under the two poses."""
    a, b, _ = visible_projections(pred, gt, K, samples)
    if len(a) == 0:
        raise NoVisibleSamples("no surface sample is visible under both poses")
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def rotation_error(pred: Pose, gt: Pose) -> float:
    """Geodesic angle between the two rotations, in degrees."""
    return float(np.degrees(rotation_angle(pred.rotation @ gt.rotation.T)))


def translation_error(pred: Pose, gt: Pose) -> float:
    return float(np.linalg.norm(pred.translation - gt.translation))


def pose_metrics(pred: Pose, gt: Pose, K: Intrinsics, samples) -> PoseMetrics:
    return PoseMetrics(pixel_error(pred, gt, K, samples), rotation_error(pred, gt), translation_error(pred, gt))


# ---------------------------------------------------------------------------
# similarity alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Similarity:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls) -> "Similarity":
        return cls(1.0, np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def inverse_apply(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation / self.scale

    def compose(self, inner: "Similarity") -> "Similarity":
        """``self(inner(x))``."""
        return Similarity(
            self.scale * inner.scale,
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
        )


def umeyama(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """Least-squares ``dst ~ s R src + t`` for matched point sets."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) < 3 or len(src) != len(dst):
        raise DegenerateGeometry("need >= 3 matched points")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    if np.linalg.matrix_rank(xs, tol=1e-12 * max(1.0, np.abs(xs).max())) < 2:
        raise DegenerateGeometry("source points are collinear")
    cov = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    var_s = np.mean(np.sum(xs * xs, axis=1))
    s = float(np.trace(np.diag(d) @ S) / var_s)
    return Similarity(s, R, mu_d - s * R @ mu_s)


def align_similarity(pred, gt, max_iterations: int = 30, matched: bool = False, tol: float = 1e-10) -> Similarity:
    """Similarity taking ``pred`` points onto ``gt`` points.

    With ``matched=True`` rows correspond and a single closed-form solve is
    returned. Otherwise nearest-neighbour association and closed-form
    updates alternate (ICP); the iterate with the lowest symmetric Chamfer
    distance is kept, so the result never does worse than the identity.
    """
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if matched:
        return umeyama(pred, gt)
    if len(pred) < 3 or len(gt) < 3:
        raise DegenerateGeometry("need >= 3 points per set")
    tree_gt = cKDTree(gt)

    def sym_chamfer(sim: Similarity) -> float:
        moved = sim.apply(pred)
        d1, _ = tree_gt.query(moved)
        d2, _ = cKDTree(moved).query(gt)
        return 0.5 * (d1.mean() + d2.mean())

    current = Similarity.identity()
    best, best_cost = current, sym_chamfer(current)
    prev_err = np.inf
    for _ in range(max_iterations):
        moved = current.apply(pred)
        dist, idx = tree_gt.query(moved)
        err = float(np.mean(dist ** 2))
        current = umeyama(pred, gt[idx])
        cost = sym_chamfer(current)
        if cost < best_cost:
            best, best_cost = current, cost
        if prev_err - err < tol:
            break
        prev_err = err
    return best


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def shape_metrics(
    pred_grid: SdfGrid,
    pred_mesh: TriangleMesh,
    gt_mesh: TriangleMesh,
    gt_inside: Callable | SdfGrid | TriangleMesh,
    align: bool = False,
    n_samples: int = 10_000,
    n_points: int = 100_000,
    seed: int = 0,
    bounds=DEFAULT_BOUNDS,
) -> ShapeMetrics:
    """All surface and volume metrics of a reconstruction.

    With ``align`` the similarity from prediction to ground truth is
    estimated first and factored out of every metric.
    """
    a = sample_surface(pred_mesh, n_samples, seed)
    b = sample_surface(gt_mesh, n_samples, seed + 1)
    pred_occ: Callable = lambda x: sample(pred_grid, x)
    if align:
        sim = align_similarity(a.points, b.points)
        a = SurfaceSamples(sim.apply(a.points), a.normals @ sim.rotation.T)
        pred_occ = lambda x: sample(pred_grid, sim.inverse_apply(x))
    return ShapeMetrics(
        iou=volumetric_iou(pred_occ, gt_inside, n_points, seed, bounds),
        chamfer_l1=chamfer_l1(a, b),
        normal_consistency=normal_consistency(a, b),
        fscore=fscore(a, b),
    )
