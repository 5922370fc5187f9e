"""Sphere tracing of voxelised SDFs.

Rays leave the camera centre through integer pixel coordinates and are
parameterised by camera-frame depth, so the march parameter at a hit is the
depth value written into the depth map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CameraInsideSurface, DimensionMismatch
from .sdf import SdfGrid, gradient_unchecked, sample
from .se3 import Intrinsics, Pose, back_project_points, camera_rays

MISS = np.inf


@dataclass(frozen=True)
class RenderConfig:
    safety_factor: float = 0.9
    surface_eps_voxels: float = 0.25
    max_steps: int = 128
    backend: str = "compiled"   # or "numpy", the vectorised reference


@dataclass(frozen=True)
class RenderOutput:
    depth: np.ndarray        # (h, w), MISS where the ray found nothing
    mask: np.ndarray         # (h, w) bool
    pixels: np.ndarray       # (n, 2) integer (u, v) of hit pixels
    points: np.ndarray       # (n, 3) world-space hit points
    point_depths: np.ndarray  # (n,)

    def camera_points(self, K: Intrinsics) -> np.ndarray:
        """Hit points in the render camera frame, ``d * K^-1 (u, v, 1)``."""
        return camera_rays(self.pixels[:, 0], self.pixels[:, 1], K) * self.point_depths[:, None]


def _box_interval(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    return tmin, tmax


def _hit_bounds(grid: SdfGrid, eps: float):
    """Box around every cell that has a corner below ``eps``; the march can
    only stop inside it."""
    cand = np.argwhere(grid.values < eps)
    if len(cand) == 0:
        return None, None
    vs = grid.voxel_size
    lo = np.maximum(grid.origin + vs * (cand.min(axis=0) - 1), grid.box_min)
    hi = np.minimum(grid.origin + vs * (cand.max(axis=0) + 1), grid.box_max)
    return lo, hi


def _empty_output(h: int, w: int) -> RenderOutput:
    return RenderOutput(np.full((h, w), MISS), np.zeros((h, w), dtype=bool),
                        np.zeros((0, 2), dtype=np.int64), np.zeros((0, 3)), np.zeros(0))


def _march_compiled(grid, eye, dirs, lens, s_start, s_end, cfg, eps):
    from ._trace import march

    return march(
        np.ascontiguousarray(grid.values, dtype=float), grid.origin.astype(float), float(grid.voxel_size),
        grid.box_min.astype(float), grid.box_max.astype(float), eye, np.ascontiguousarray(dirs),
        lens, s_start, s_end, float(cfg.safety_factor), float(eps), int(cfg.max_steps),
    )


def _march_numpy(grid, eye, dirs, lens, s_start, s_end, cfg, eps):
    """Vectorised reference march over all active rays at once."""
    out = np.full(len(dirs), MISS)
    idx = np.arange(len(dirs))
    s = s_start.copy()
    s_prev = np.full(len(dirs), np.nan)
    f_prev = np.full(len(dirs), np.nan)
    for _ in range(cfg.max_steps):
        if len(idx) == 0:
            break
        f = sample(grid, eye + s[:, None] * dirs)
        hit = (np.abs(f) < eps) | (f < 0)
        if np.any(hit):
            sh, fh, sp, fp = s[hit], f[hit], s_prev[hit], f_prev[hit]
            with np.errstate(divide="ignore", invalid="ignore"):
                secant = sh - fh * (sh - sp) / (fh - fp)
            ok = np.isfinite(secant) & (secant >= sp) & (secant <= sh + (sh - sp))
            out[idx[hit]] = np.where(ok, secant, sh)
        keep = ~hit
        s_prev, f_prev = s[keep], f[keep]
        s = s[keep] + cfg.safety_factor * f[keep] / lens[keep]
        idx, dirs, lens, s_end = idx[keep], dirs[keep], lens[keep], s_end[keep]
        inside = s <= s_end
        s, s_prev, f_prev = s[inside], s_prev[inside], f_prev[inside]
        idx, dirs, lens, s_end = idx[inside], dirs[inside], lens[inside], s_end[inside]
    return out


def render(grid: SdfGrid, pose: Pose, K: Intrinsics, cfg: RenderConfig = RenderConfig()) -> RenderOutput:
    """Depth, mask and visible surface points of ``grid`` seen from ``pose``."""
    eye = np.asarray(pose.translation, dtype=float)
    if sample(grid, eye) < 0:
        raise CameraInsideSurface("camera centre lies inside the surface")
    h, w = K.height, K.width
    eps = cfg.surface_eps_voxels * grid.voxel_size

    vv, uu = np.mgrid[0:h, 0:w]
    rays = camera_rays(uu.ravel(), vv.ravel(), K) @ pose.rotation.T
    ray_len = np.linalg.norm(rays, axis=1)

    lo, hi = _hit_bounds(grid, eps)
    if lo is None:
        return _empty_output(h, w)
    tmin, tmax = _box_interval(eye, rays, lo, hi)
    tmin = np.maximum(tmin, 0.0)
    active = np.flatnonzero(tmax > tmin)

    depth_flat = np.full(h * w, MISS)
    march = _march_numpy if cfg.backend == "numpy" else _march_compiled
    depth_flat[active] = march(grid, eye, rays[active], ray_len[active], tmin[active], tmax[active], cfg, eps)

    depth = depth_flat.reshape(h, w)
    mask = np.isfinite(depth)
    hit_idx = np.flatnonzero(mask.ravel())
    pixels = np.stack([hit_idx % w, hit_idx // w], axis=1)
    d = depth_flat[hit_idx]
    points = back_project_points(pixels[:, 0], pixels[:, 1], d, pose, K) if len(d) else np.zeros((0, 3))
    return RenderOutput(depth, mask, pixels, points, d)


def shade(grid: SdfGrid, out: RenderOutput, light_dir=(0.3, -0.4, 0.85), ambient: float = 0.25) -> np.ndarray:
    """Lambertian intensity image from SDF normals; background is 0."""
    img = np.zeros(out.depth.shape)
    if len(out.points) == 0:
        return img
    n = gradient_unchecked(grid, out.points)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
    light = np.asarray(light_dir, dtype=float)
    light = light / np.linalg.norm(light)
    lum = ambient + (1.0 - ambient) * np.clip(n @ light, 0.0, None)
    img[out.pixels[:, 1], out.pixels[:, 0]] = lum
    return img


def render_depth_consistency(grid: SdfGrid, pose: Pose, K: Intrinsics, gt_depth, cfg: RenderConfig = RenderConfig()) -> float:
    """Mean absolute depth error over pixels where both renders hit."""
    gt_depth = np.asarray(gt_depth, dtype=float)
    if gt_depth.shape != K.shape:
        raise DimensionMismatch(f"gt depth {gt_depth.shape} vs image {K.shape}")
    out = render(grid, pose, K, cfg)
    both = out.mask & np.isfinite(gt_depth)
    if not np.any(both):
        return 0.0
    return float(np.mean(np.abs(out.depth[both] - gt_depth[both])))
