"""Synthetic few-view scenes with analytic ground truth."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidSpec
from .render import RenderConfig, render, shade
from .sdf import DEFAULT_BOUNDS, SdfGrid, TriangleMesh, analytic_sdf, extract_mesh, from_analytic
from .se3 import Intrinsics, Pose, Twist, exp_map, look_at

NOISE_LEVELS = {"l1": 0.75e-2, "l2": 1.5e-2, "l3": 2.25e-2}
LIGHT_DIR = (0.3, -0.4, 0.85)


def default_intrinsics() -> Intrinsics:
    return Intrinsics(fx=245.0, fy=245.0, cx=112.0, cy=112.0, width=224, height=224)


@dataclass(frozen=True)
class ViewObservation:
    intensity: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    K: Intrinsics
    pose_estimate: Pose

    def __post_init__(self):
        if self.depth.shape != self.K.shape or self.mask.shape != self.K.shape:
            raise InvalidSpec("view images must match the intrinsics size")
        if not np.array_equal(self.mask, np.isfinite(self.depth)):
            raise InvalidSpec("mask must mark exactly the finite depths")

    def with_pose(self, pose: Pose) -> "ViewObservation":
        return replace(self, pose_estimate=pose)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    level: str = "custom"
    translation_scale: float = 1.0

    @classmethod
    def from_level(cls, level: str) -> "NoiseSpec":
        key = level.lower()
        if key == "gt":
            return cls(0.0, "gt")
        if key in NOISE_LEVELS:
            return cls(NOISE_LEVELS[key], key.upper())
        if key.startswith("custom:"):
            return cls(float(key.split(":", 1)[1]), "custom")
        raise InvalidSpec(f"unknown noise level {level!r}")


@dataclass(frozen=True)
class SceneSpec:
    shape: dict | None = None       # None -> drawn from the shape zoo
    num_views: int = 5
    radius: float = 1.5
    elevation_deg: float = 15.0
    resolution: int = 64
    bounds: tuple[float, float] = DEFAULT_BOUNDS
    intrinsics: Intrinsics = field(default_factory=default_intrinsics)

    def to_json(self) -> dict:
        return {
            "shape": self.shape, "num_views": self.num_views, "radius": self.radius,
            "elevation_deg": self.elevation_deg, "resolution": self.resolution,
            "bounds": list(self.bounds), "intrinsics": self.intrinsics.to_json(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneSpec":
        obj = dict(obj)
        if "intrinsics" in obj:
            obj["intrinsics"] = Intrinsics.from_json(obj["intrinsics"])
        if "bounds" in obj:
            obj["bounds"] = tuple(obj["bounds"])
        return cls(**obj)


@dataclass
class Scene:
    shape: dict
    gt_grid: SdfGrid
    views: list[ViewObservation]
    gt_poses: list[Pose]
    K: Intrinsics
    seed: int
    _mesh: TriangleMesh | None = field(default=None, repr=False)

    @property
    def gt_mesh(self) -> TriangleMesh:
        if self._mesh is None:
            self._mesh = extract_mesh(self.gt_grid)
        return self._mesh

    def gt_sdf(self, points) -> np.ndarray:
        return analytic_sdf(self.shape, points)

    def with_poses(self, poses) -> list[ViewObservation]:
        """Copies of the views carrying the given pose estimates."""
        return [v.with_pose(p) for v, p in zip(self.views, poses)]


# ---------------------------------------------------------------------------
# shape zoo
# ---------------------------------------------------------------------------

ZOO = ("sphere", "box", "torus", "two_spheres", "box_minus_sphere")


def zoo_shape(name: str, rng: np.random.Generator | None = None) -> dict:
    """A zoo member, with mild parameter jitter when ``rng`` is given."""
    j = (lambda lo, hi: rng.uniform(lo, hi)) if rng is not None else (lambda lo, hi: 0.5 * (lo + hi))
    if name == "sphere":
        return {"type": "sphere", "center": [0.0, 0.0, 0.0], "radius": j(0.3, 0.4)}
    if name == "box":
        return {"type": "box", "center": [0.0, 0.0, 0.0],
                "half_extents": [j(0.2, 0.35), j(0.15, 0.3), j(0.15, 0.3)]}
    if name == "torus":
        return {"type": "torus", "center": [0.0, 0.0, 0.0], "major": j(0.25, 0.32), "minor": j(0.08, 0.12)}
    if name == "two_spheres":
        off = j(0.12, 0.2)
        return {"type": "union", "children": [
            {"type": "sphere", "center": [-off, 0.0, 0.0], "radius": j(0.2, 0.26)},
            {"type": "sphere", "center": [off, 0.05, 0.05], "radius": j(0.15, 0.22)},
        ]}
    if name == "box_minus_sphere":
        return {"type": "difference", "children": [
            {"type": "box", "center": [0.0, 0.0, 0.0], "half_extents": [j(0.25, 0.32), j(0.25, 0.32), j(0.2, 0.28)]},
            {"type": "sphere", "center": [0.2, -0.2, 0.2], "radius": j(0.2, 0.28)},
        ]}
    raise InvalidSpec(f"unknown zoo shape {name!r}")


# ---------------------------------------------------------------------------
# cameras and scenes
# ---------------------------------------------------------------------------

def camera_ring(num_views: int, radius: float, elevation_deg: float, rng: np.random.Generator) -> list[Pose]:
    """Cameras on a sphere looking at the origin; z is world-up."""
    az = rng.uniform(0.0, 2.0 * math.pi, num_views)
    el = np.deg2rad(rng.uniform(-elevation_deg, elevation_deg, num_views))
    poses = []
    for a, e in zip(az, el):
        eye = radius * np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])
        poses.append(look_at(eye))
    return poses


def observe(grid: SdfGrid, pose: Pose, K: Intrinsics, cfg: RenderConfig = RenderConfig()) -> ViewObservation:
    out = render(grid, pose, K, cfg)
    return ViewObservation(shade(grid, out, LIGHT_DIR), out.depth, out.mask, K, pose)


def generate_scene(spec: SceneSpec = SceneSpec(), seed: int = 0) -> Scene:
    if spec.num_views < 1:
        raise InvalidSpec("a scene needs at least one view")
    if not spec.radius > 0 or spec.resolution < 8:
        raise InvalidSpec("camera radius must be positive and resolution >= 8")
    rng = np.random.default_rng(seed)
    shape = spec.shape
    if shape is None:
        shape = zoo_shape(ZOO[rng.integers(len(ZOO))], rng)
    grid = from_analytic(shape, spec.resolution, spec.bounds)
    poses = camera_ring(spec.num_views, spec.radius, spec.elevation_deg, rng)
    views = [observe(grid, p, spec.intrinsics) for p in poses]
    return Scene(shape, grid, views, poses, spec.intrinsics, seed)


def sample_twists(n: int, noise: NoiseSpec, rng: np.random.Generator) -> list[Twist]:
    rot = rng.normal(0.0, noise.sigma, (n, 3))
    trans = rng.normal(0.0, noise.sigma * noise.translation_scale, (n, 3))
    return [Twist(r, t) for r, t in zip(rot, trans)]


def perturb_poses(poses, noise: NoiseSpec, seed: int = 0) -> list[Pose]:
    """Left-multiply each pose by ``exp`` of an isotropic Gaussian twist."""
    if noise.sigma == 0:
        return list(poses)
    twists = sample_twists(len(poses), noise, np.random.default_rng(seed))
    return [exp_map(xi) @ p for xi, p in zip(twists, poses)]
