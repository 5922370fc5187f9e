"""Shape stage: image-feature pooling, feature volumes, SDF losses and the
truncated-SDF fusion used as the shape predictor."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.ndimage import uniform_filter

from .errors import NoValidDepth
from .features import FeatureMap
from .sdf import DEFAULT_BOUNDS, DEFAULT_RESOLUTION, SdfGrid, TriangleMesh, gradient_unchecked, make_grid_spec, sample
from .scenes import ViewObservation
from .se3 import camera_rays, project_points


# ---------------------------------------------------------------------------
# image feature pooling
# ---------------------------------------------------------------------------

def sample_image_features_batch(points, views: Sequence[ViewObservation], feature_maps: Sequence[FeatureMap]):
    """Average-pooled per-view features at ``(n, 3)`` points.

    A view contributes when the point projects in front of its camera and
    inside its image. Returns ``(features (n, c), counts (n,))``; points seen
    by no view get zeros. Contributions are sorted before summation so the
    result does not depend on view order.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    c = feature_maps[0].channels
    contrib = np.zeros((len(views), len(pts), c))
    counts = np.zeros(len(pts), dtype=np.int64)
    for i, (view, fmap) in enumerate(zip(views, feature_maps)):
        uv, z = project_points(pts, view.pose_estimate, view.K)
        h, w = fmap.shape
        with np.errstate(invalid="ignore"):
            ok = (z > 1e-9) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
        if np.any(ok):
            contrib[i, ok] = fmap.sample(uv[ok, 0], uv[ok, 1])
        counts += ok
    total = np.sort(contrib, axis=0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        pooled = np.where(counts[:, None] > 0, total / np.maximum(counts, 1)[:, None], 0.0)
    return pooled, counts


def sample_image_features(x, views, feature_maps) -> tuple[np.ndarray, int]:
    f, n = sample_image_features_batch(np.reshape(x, (1, 3)), views, feature_maps)
    return f[0], int(n[0])


def build_feature_volume(
    views,
    feature_maps,
    resolution: int = DEFAULT_RESOLUTION,
    bounds=DEFAULT_BOUNDS,
    smooth: bool = True,
) -> np.ndarray:
    """``(c, d, d, d)`` volume of pooled image features at voxel centres.

    The learned 3D refinement network is replaced by one 3x3x3 box filter
    per channel (``smooth=False`` returns the raw pooled volume).
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    origin, vs = make_grid_spec(resolution, bounds)
    ax = origin[0] + vs * np.arange(resolution)
    centers = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    feats, _ = sample_image_features_batch(centers, views, feature_maps)
    vol = np.moveaxis(feats.reshape(resolution, resolution, resolution, -1), -1, 0)
    if smooth:
        vol = np.stack([uniform_filter(ch, size=3, mode="nearest") for ch in vol])
    return vol


# ---------------------------------------------------------------------------
# training losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SdfSamples:
    """Supervision sets: free-space points with distances, surface points
    with unit normals."""

    space_points: np.ndarray
    space_sdf: np.ndarray
    surface_points: np.ndarray
    surface_normals: np.ndarray


@dataclass(frozen=True)
class SdfLoss:
    l1: float
    grad: float
    lambda_grad: float
    skipped: int

    @property
    def total(self) -> float:
        return self.l1 + self.lambda_grad * self.grad


def make_sdf_samples(
    sdf_fn,
    mesh: TriangleMesh,
    n_space: int = 4096,
    n_surface: int = 2048,
    near_sigma: float = 0.02,
    bounds=DEFAULT_BOUNDS,
    seed: int = 0,
) -> SdfSamples:
    """Half uniform-in-box, half jittered-surface space samples, plus surface
    samples whose normals come from central differences of ``sdf_fn``."""
    from .metrics import sample_surface

    rng = np.random.default_rng(seed)
    n_uniform = n_space // 2
    uniform = rng.uniform(bounds[0], bounds[1], (n_uniform, 3))
    near = sample_surface(mesh, n_space - n_uniform, seed + 1).points
    near = near + rng.normal(0.0, near_sigma, near.shape)
    space = np.concatenate([uniform, near])
    surf = sample_surface(mesh, n_surface, seed + 2).points
    h = 1e-5
    grad = np.stack(
        [(sdf_fn(surf + h * e) - sdf_fn(surf - h * e)) / (2 * h) for e in np.eye(3)], axis=1
    )
    normals = grad / np.linalg.norm(grad, axis=1, keepdims=True)
    return SdfSamples(space, np.asarray(sdf_fn(space), dtype=float), surf, normals)


def sdf_loss(pred: SdfGrid, samples: SdfSamples, lambda_grad: float = 0.1) -> SdfLoss:
    """L1 distance error on space samples plus normal-direction error on
    surface samples (gradients shorter than 1e-12 are skipped)."""
    l1 = float(np.sum(np.abs(sample(pred, samples.space_points) - samples.space_sdf)))
    g = gradient_unchecked(pred, samples.surface_points)
    gn = np.linalg.norm(g, axis=1)
    ok = gn >= 1e-12
    unit = g[ok] / gn[ok, None]
    grad = float(np.sum(np.linalg.norm(unit - samples.surface_normals[ok], axis=1)))
    return SdfLoss(l1, grad, lambda_grad, int(np.count_nonzero(~ok)))


# ---------------------------------------------------------------------------
# TSDF fusion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionConfig:
    resolution: int = DEFAULT_RESOLUTION
    bounds: tuple[float, float] = DEFAULT_BOUNDS
    truncation_voxels: float = 4.0
    occlusion: str = "carve"


OCCLUSION_POLICIES = ("carve", "unobserved", "clamp")


def fuse_tsdf(views: Sequence[ViewObservation], cfg: FusionConfig = FusionConfig()) -> SdfGrid:
    """Fuse depth maps into a truncated SDF by voting over views.

    For each view that has a voxel in front of the camera and inside the
    image, the voxel is *free* when the pixel is a miss or the observed
    surface lies more than tau behind it, *near* when the along-ray
    difference is within tau, and *occluded* otherwise. Voxels with near
    votes take the mean of their near and free contributions (clamped
    differences, free counting as +tau). The rest depend on ``cfg.occlusion``:

    ``carve``      -tau when occluded in every view, else +tau (any free
                   vote carves);
    ``unobserved`` always +tau;
    ``clamp``      every view votes its clamped difference (occluded -> -tau).
    """
    if cfg.occlusion not in OCCLUSION_POLICIES:
        raise ValueError(f"unknown occlusion policy {cfg.occlusion!r}")
    if cfg.truncation_voxels < 2.0:
        raise ValueError("truncation must span at least two voxels")
    origin, vs = make_grid_spec(cfg.resolution, cfg.bounds)
    tau = cfg.truncation_voxels * vs
    d = cfg.resolution
    if not any(np.any(v.mask) for v in views):
        raise NoValidDepth("no view has a valid depth pixel")
    ax = origin[0] + vs * np.arange(d)
    centers = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)

    n = len(centers)
    total = np.zeros(n)      # sum over near and free contributions
    near_n = np.zeros(n, dtype=np.int64)
    free_n = np.zeros(n, dtype=np.int64)
    occ_n = np.zeros(n, dtype=np.int64)
    clamp_total = np.zeros(n)
    for view in views:
        K = view.K
        uv, z = project_points(centers, view.pose_estimate, K)
        with np.errstate(invalid="ignore"):
            ui = np.rint(uv[:, 0])
            vi = np.rint(uv[:, 1])
            seen = (z > 1e-9) & (ui >= 0) & (ui <= K.width - 1) & (vi >= 0) & (vi <= K.height - 1)
        idx = np.flatnonzero(seen)
        ui = ui[idx].astype(np.intp)
        vi = vi[idx].astype(np.intp)
        obs = view.depth[vi, ui]
        ray_scale = np.linalg.norm(camera_rays(ui, vi, K), axis=1)
        with np.errstate(invalid="ignore"):
            diff = np.where(np.isfinite(obs), (obs - z[idx]) * ray_scale, np.inf)
        free = diff > tau
        occ = diff < -tau
        near = ~(free | occ)
        contrib = np.clip(diff, -tau, tau)
        total[idx[~occ]] += contrib[~occ]
        clamp_total[idx] += contrib
        near_n[idx[near]] += 1
        free_n[idx[free]] += 1
        occ_n[idx[occ]] += 1

    if cfg.occlusion == "clamp":
        votes = near_n + free_n + occ_n
        values = np.full(n, tau)
        has = votes > 0
        values[has] = clamp_total[has] / votes[has]
        return SdfGrid(values.reshape(d, d, d), origin, vs)

    values = np.full(n, tau)
    has = near_n > 0
    values[has] = total[has] / (near_n[has] + free_n[has])
    if cfg.occlusion == "carve":
        values[~has & (free_n == 0) & (occ_n == len(views))] = -tau
    return SdfGrid(values.reshape(d, d, d), origin, vs)
