"""Initial camera poses from dense scene-coordinate maps.

Each pixel carries a predicted world coordinate; a RANSAC loop over
six-point DLT hypotheses recovers the camera pose, which is then polished by
Gauss-Newton on the reprojection error of the consensus set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Protocol

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    FewViewError,
    NoConsensus,
    TooFewCorrespondences,
    ViewFailure,
)
from .se3 import Intrinsics, Pose, back_project_points, camera_rays, rodrigues, rotation_angle

if TYPE_CHECKING:
    from .scenes import Scene

MIN_SAMPLE = 6


@dataclass(frozen=True)
class SceneCoordMap:
    coords: np.ndarray   # (h, w, 3) world coordinates
    weights: np.ndarray  # (h, w) in {0, 1}

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        weights = np.asarray(self.weights).astype(np.uint8)
        if coords.shape[:2] != weights.shape or coords.shape[2:] != (3,):
            raise DimensionMismatch(f"coords {coords.shape} vs weights {weights.shape}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "weights", weights)

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    def correspondences(self) -> tuple[np.ndarray, np.ndarray]:
        """``(uv, xyz)`` for all valid pixels, row-major order."""
        v, u = np.nonzero(self.weights)
        return np.stack([u, v], axis=1).astype(float), self.coords[v, u]


@dataclass(frozen=True)
class PnPResult:
    pose: Pose
    inlier_count: int
    inlier_ratio: float
    reproj_rmse: float


@dataclass(frozen=True)
class RansacConfig:
    iterations: int = 500
    inlier_px_threshold: float = 2.0
    seed: int = 0
    max_correspondences: int = 4096
    refine_iterations: int = 10
    local_refit: bool = True
    sample_polish: int = 3      # Gauss-Newton steps on each minimal sample


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def gt_scene_coords(gt_depth, gt_pose: Pose, K: Intrinsics) -> SceneCoordMap:
    """Scene coordinates obtained by back-projecting ground-truth depth."""
    gt_depth = np.asarray(gt_depth, dtype=float)
    valid = np.isfinite(gt_depth) & (gt_depth > 0)
    coords = np.zeros(gt_depth.shape + (3,))
    v, u = np.nonzero(valid)
    if len(v):
        coords[v, u] = back_project_points(u, v, gt_depth[v, u], gt_pose, K)
    return SceneCoordMap(coords, valid)


def scene_coord_loss(pred: SceneCoordMap, gt_depth, gt_pose: Pose, K: Intrinsics) -> float:
    """Weighted sum of Euclidean distances to back-projected GT coordinates.

    Uses the conventional ``d * R K^-1 (u, v, 1) + t`` back-projection. The
    weights are taken from ``pred``; pixels without GT depth never count.
    """
    gt_depth = np.asarray(gt_depth, dtype=float)
    if gt_depth.shape != pred.shape or gt_depth.shape != K.shape:
        raise DimensionMismatch(f"prediction {pred.shape}, depth {gt_depth.shape}, image {K.shape}")
    gt = gt_scene_coords(gt_depth, gt_pose, K)
    w = pred.weights.astype(bool) & gt.weights.astype(bool)
    diff = pred.coords[w] - gt.coords[w]
    return float(np.sum(np.linalg.norm(diff, axis=1)))


# ---------------------------------------------------------------------------
# minimal solver
# ---------------------------------------------------------------------------

def _dlt(rays: np.ndarray, xyz: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Calibrated DLT on normalised image rays; returns world-to-camera R, t."""
    centroid = xyz.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.mean(np.linalg.norm(xyz - centroid, axis=1)), 1e-300)
    Xn = (xyz - centroid) * scale
    n = len(xyz)
    Xh = np.hstack([Xn, np.ones((n, 1))])
    x, y = rays[:, 0], rays[:, 1]
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -x[:, None] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -y[:, None] * Xh
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if len(s) < 12 or s[-2] < 1e-9 * s[0]:
        raise DegenerateConfiguration("DLT system is rank deficient")
    P = Vt[-1].reshape(3, 4)
    # undo the 3D normalisation: X_n = scale * (X - centroid)
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = -scale * centroid
    P = P @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, sv, Vt3 = np.linalg.svd(M)
    R = U @ Vt3
    t = P[:, 3] / sv.mean()
    return R, t


def _gauss_newton(rays, xyz, R, t, iterations, fx=1.0, fy=1.0, tol=1e-10):
    """Minimise pixel reprojection error over world-to-camera R, t."""
    for _ in range(iterations):
        xc = xyz @ R.T + t
        z = xc[:, 2]
        if np.any(z <= 1e-12):
            break
        r = np.concatenate([xc[:, 0] / z - rays[:, 0], xc[:, 1] / z - rays[:, 1]])
        n = len(z)
        # d(x/z, y/z)/d xc
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = 1.0 / z
        dproj[:, 0, 2] = -xc[:, 0] / z ** 2
        dproj[:, 1, 1] = 1.0 / z
        dproj[:, 1, 2] = -xc[:, 1] / z ** 2
        dxc = np.zeros((n, 3, 6))
        dxc[:, :, :3] = _batched_neg_skew(xc)
        dxc[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", dproj, dxc)
        J = np.concatenate([fx * J[:, 0, :], fy * J[:, 1, :]])
        r[:n] *= fx
        r[n:] *= fy
        delta = np.linalg.lstsq(J, -r, rcond=None)[0]
        dR = rodrigues(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        if np.linalg.norm(delta) < tol:
            break
    return R, t


def _batched_neg_skew(p: np.ndarray) -> np.ndarray:
    out = np.zeros((len(p), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = p[:, 2], -p[:, 1]
    out[:, 1, 0], out[:, 1, 2] = -p[:, 2], p[:, 0]
    out[:, 2, 0], out[:, 2, 1] = p[:, 1], -p[:, 0]
    return out


def pnp_minimal(uv, xyz, K: Intrinsics, refine_iterations: int = 10) -> Pose:
    """Camera-to-world pose from >= 6 pixel/world correspondences.

    DLT, projection of the rotation block onto SO(3), then at most
    ``refine_iterations`` Gauss-Newton steps on the reprojection error.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if len(uv) < MIN_SAMPLE:
        raise DegenerateConfiguration(f"need {MIN_SAMPLE} correspondences, got {len(uv)}")
    rays = camera_rays(uv[:, 0], uv[:, 1], K)
    R, t = _dlt(rays, xyz)
    if refine_iterations:
        R, t = _gauss_newton(rays, xyz, R, t, refine_iterations, K.fx, K.fy)
    return Pose(R, t).inverse()


# ---------------------------------------------------------------------------
# RANSAC
# ---------------------------------------------------------------------------

def reprojection_errors(pose: Pose, uv: np.ndarray, xyz: np.ndarray, K: Intrinsics) -> np.ndarray:
    """Pixel reprojection error per correspondence (inf behind the camera)."""
    w2c = pose.inverse()
    xc = xyz @ w2c.rotation.T + w2c.translation
    z = xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        du = K.fx * xc[:, 0] / z + K.cx - uv[:, 0]
        dv = K.fy * xc[:, 1] / z + K.cy - uv[:, 1]
        err = np.hypot(du, dv)
    return np.where(z > 1e-9, err, np.inf)


def _local_refit(uv, xyz, rays, K: Intrinsics, cfg: RansacConfig, count: int, inliers: np.ndarray):
    """Refit a new best hypothesis on its own consensus set and rescore,
    repeating while the consensus keeps growing. Noisy minimal samples give
    poor hypotheses; their inlier sets still give good ones."""
    for _ in range(3):
        try:
            R, t = _dlt(rays[inliers], xyz[inliers])
        except DegenerateConfiguration:
            break
        R, t = _gauss_newton(rays[inliers], xyz[inliers], R, t, 2, K.fx, K.fy)
        xc = xyz @ R.T + t
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.hypot(K.fx * (xc[:, 0] / z - rays[:, 0]), K.fy * (xc[:, 1] / z - rays[:, 1]))
        refit = (z > 1e-9) & (err < cfg.inlier_px_threshold)
        n_refit = int(refit.sum())
        if n_refit <= count:
            break
        count, inliers = n_refit, refit
    return count, inliers


def ransac_pnp(coord_map: SceneCoordMap, K: Intrinsics, cfg: RansacConfig = RansacConfig()) -> PnPResult:
    uv, xyz = coord_map.correspondences()
    if len(uv) < MIN_SAMPLE:
        raise TooFewCorrespondences(f"{len(uv)} valid pixels, need {MIN_SAMPLE}")
    rng = np.random.default_rng(cfg.seed)
    if len(uv) > cfg.max_correspondences:
        pick = np.sort(rng.choice(len(uv), cfg.max_correspondences, replace=False))
        uv, xyz = uv[pick], xyz[pick]
    n = len(uv)
    rays = camera_rays(uv[:, 0], uv[:, 1], K)

    best_count, best_inliers = -1, None
    for _ in range(cfg.iterations):
        sample = rng.choice(n, MIN_SAMPLE, replace=False)
        try:
            R, t = _dlt(rays[sample], xyz[sample])
        except DegenerateConfiguration:
            continue
        if cfg.sample_polish:
            R, t = _gauss_newton(rays[sample], xyz[sample], R, t, cfg.sample_polish, K.fx, K.fy)
        xc = xyz @ R.T + t
        z = xc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.hypot(K.fx * (xc[:, 0] / z - rays[:, 0]), K.fy * (xc[:, 1] / z - rays[:, 1]))
        inliers = (z > 1e-9) & (err < cfg.inlier_px_threshold)
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            if cfg.local_refit and count >= MIN_SAMPLE:
                best_count, best_inliers = _local_refit(uv, xyz, rays, K, cfg, best_count, best_inliers)

    if best_inliers is None or best_count < max(MIN_SAMPLE, 0.1 * n):
        raise NoConsensus(f"best hypothesis has {max(best_count, 0)} of {n} inliers")

    pose = pnp_minimal(uv[best_inliers], xyz[best_inliers], K, cfg.refine_iterations)
    err = reprojection_errors(pose, uv, xyz, K)
    inliers = err < cfg.inlier_px_threshold
    if inliers.sum() >= MIN_SAMPLE and not np.array_equal(inliers, best_inliers):
        pose = pnp_minimal(uv[inliers], xyz[inliers], K, cfg.refine_iterations)
        err = reprojection_errors(pose, uv, xyz, K)
        inliers = err < cfg.inlier_px_threshold
    count = int(inliers.sum())
    ratio = count / n
    if ratio < 0.1:
        raise NoConsensus(f"refined pose keeps {count} of {n} inliers")
    rmse = float(np.sqrt(np.mean(err[inliers] ** 2))) if count else float("inf")
    return PnPResult(pose, count, ratio, rmse)


# ---------------------------------------------------------------------------
# predictors
# ---------------------------------------------------------------------------

class SceneCoordPredictor(Protocol):
    """Maps a whole scene (all views jointly) to one coordinate map per view."""

    def predict(self, scene: "Scene") -> list[SceneCoordMap]: ...


class OraclePredictor:
    """Exact scene coordinates from ground-truth depth and pose."""

    def predict(self, scene: "Scene") -> list[SceneCoordMap]:
        return [gt_scene_coords(v.depth, p, scene.K) for v, p in zip(scene.views, scene.gt_poses)]


@dataclass
class NoisyPredictor:
    """Ground-truth coordinates plus isotropic Gaussian noise."""

    sigma: float
    seed: int = 0

    def predict(self, scene: "Scene") -> list[SceneCoordMap]:
        rng = np.random.default_rng(self.seed)
        out = []
        for m in OraclePredictor().predict(scene):
            noisy = m.coords + rng.normal(0.0, self.sigma, m.coords.shape) * m.weights[..., None]
            out.append(SceneCoordMap(noisy, m.weights))
        return out


@dataclass
class OutlierPredictor:
    """Replaces a fraction of valid coordinates with uniform box samples."""

    fraction: float
    seed: int = 0
    bounds: tuple[float, float] = (-0.55, 0.55)
    sigma: float = 0.0

    def predict(self, scene: "Scene") -> list[SceneCoordMap]:
        return [self.corrupt(m, np.random.default_rng([self.seed, i]))
                for i, m in enumerate(OraclePredictor().predict(scene))]

    def corrupt(self, m: SceneCoordMap, rng: np.random.Generator) -> SceneCoordMap:
        coords = m.coords.copy()
        v, u = np.nonzero(m.weights)
        if self.sigma > 0:
            coords[v, u] += rng.normal(0.0, self.sigma, (len(v), 3))
        n_out = int(round(self.fraction * len(v)))
        pick = rng.choice(len(v), n_out, replace=False)
        lo, hi = self.bounds
        coords[v[pick], u[pick]] = rng.uniform(lo, hi, (n_out, 3))
        return SceneCoordMap(coords, m.weights)


def init_poses(scene: "Scene", predictor: SceneCoordPredictor, cfg: RansacConfig = RansacConfig()) -> list[PnPResult]:
    """One RANSAC-PnP result per view; failures carry the view index."""
    if not scene.views:
        raise TooFewCorrespondences("scene has no views")
    maps = predictor.predict(scene)
    results = []
    for i, m in enumerate(maps):
        try:
            view_cfg = replace(cfg, seed=cfg.seed + i)
            results.append(ransac_pnp(m, scene.K, view_cfg))
        except FewViewError as exc:
            raise ViewFailure(i, exc) from exc
    return results


def rotation_error_rad(a: Pose, b: Pose) -> float:
    return rotation_angle(a.rotation @ b.rotation.T)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

_COORD_HEADER = struct.Struct("<4sII")
_COORD_DTYPE = np.dtype([("xyz", "<f4", (3,)), ("w", "u1")])


def save_coord_map(m: SceneCoordMap, path) -> None:
    h, w = m.shape
    rec = np.zeros(h * w, dtype=_COORD_DTYPE)
    rec["xyz"] = m.coords.reshape(-1, 3)
    rec["w"] = m.weights.ravel()
    Path(path).write_bytes(_COORD_HEADER.pack(b"SCRD", h, w) + rec.tobytes())


def load_coord_map(path) -> SceneCoordMap:
    raw = Path(path).read_bytes()
    magic, h, w = _COORD_HEADER.unpack_from(raw, 0)
    if magic != b"SCRD":
        raise ValueError(f"{path}: not an SCRD file")
    rec = np.frombuffer(raw, dtype=_COORD_DTYPE, offset=_COORD_HEADER.size, count=h * w)
    return SceneCoordMap(rec["xyz"].reshape(h, w, 3).astype(float), rec["w"].reshape(h, w))
