"""Alternating shape and pose optimisation.

    g0 <- shape_update(images, T0)
    for t in 0..n1-1:
        for j in 0..n2-1:
            render g_t at T_t, then one feature-alignment pose update per view
        g_{t+1} <- shape_update(images, T_t)
    return g_{n1}, T_{n1}

Pose updates are applied in place to the current estimates. Each view is
updated independently; a view whose update fails keeps its pose.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import FewViewError
from .features import FeatureConfig, FeatureMap, analytic_feature_extractor
from .metrics import ShapeMetrics, pixel_error, rotation_error, shape_metrics, translation_error
from .pose_refine import AlignmentProblem, apply_update, lm_step, warp
from .render import RenderConfig, render, shade
from .scenes import LIGHT_DIR, Scene
from .sdf import SdfGrid, extract_mesh
from .se3 import Pose, Twist, exp_map, log_map
from .shape import FusionConfig, fuse_tsdf

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlternationConfig:
    n1: int = 3
    n2: int = 5
    prior_weight: float = 0.1
    anchor_gauge: bool = False
    max_damping_trials: int = 4
    min_step_px: float = 0.3
    damping: float | None = None
    lm_mode: str = "stacked"
    render: RenderConfig = field(default_factory=RenderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    shape_metrics: bool = True
    metric_samples: int = 4000
    metric_points: int = 20_000

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("n1 and n2 must be at least 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["fusion"]["bounds"] = list(d["fusion"]["bounds"])
        d["features"]["weights"] = list(d["features"]["weights"])
        return d


@dataclass
class IterationRecord:
    iteration: int
    poses: list[Pose]
    pixel_error: float | None = None
    rotation_error: float | None = None
    translation_error: float | None = None
    shape: ShapeMetrics | None = None
    residuals: list[list[tuple[float, float] | None]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "poses": [p.to_json() for p in self.poses],
            "pixel_error": self.pixel_error,
            "rotation_error": self.rotation_error,
            "translation_error": self.translation_error,
            "shape": asdict(self.shape) if self.shape is not None else None,
            "residuals": self.residuals,
            "failures": self.failures,
        }


@dataclass
class Trace:
    records: list[IterationRecord] = field(default_factory=list)
    shape_updates: int = 0
    pose_updates: int = 0

    def __len__(self) -> int:
        return len(self.records)

    def pixel_errors(self) -> list[float | None]:
        return [r.pixel_error for r in self.records]


@dataclass
class Reconstruction:
    grid: SdfGrid
    poses: list[Pose]
    trace: Trace


def anchor_gauge(poses, init) -> list[Pose]:
    """Remove the mean world-frame correction ``log(T_i T0_i^-1)`` from all poses.

    Moving every camera and the shape by one rigid motion leaves the images
    unchanged, so nothing in the alignment pins that common motion down; it is
    held at the mean of the initial estimates instead.
    """
    deltas = np.array([log_map(p @ q.inverse()).as_vector() for p, q in zip(poses, init)])
    correction = exp_map(Twist.from_vector(deltas.mean(axis=0))).inverse()
    return [correction @ p for p in poses]


def _pose_stats(scene: Scene, poses, samples):
    pix = [pixel_error(p, g, scene.K, samples) for p, g in zip(poses, scene.gt_poses)]
    rot = [rotation_error(p, g) for p, g in zip(poses, scene.gt_poses)]
    tra = [translation_error(p, g) for p, g in zip(poses, scene.gt_poses)]
    return float(np.mean(pix)), float(np.mean(rot)), float(np.mean(tra))


def evaluate_grid(scene: Scene, grid: SdfGrid, cfg: AlternationConfig, align: bool = False) -> ShapeMetrics | None:
    try:
        mesh = extract_mesh(grid)
    except FewViewError:
        return None
    return shape_metrics(grid, mesh, scene.gt_mesh, scene.gt_sdf, align=align,
                         n_samples=cfg.metric_samples, n_points=cfg.metric_points,
                         bounds=cfg.fusion.bounds)


def _damped_step(prob: AlignmentProblem, cfg: AlternationConfig):
    """LM step with rejection: damping grows tenfold until the residual drops.

    Returns ``None`` when no trial within ``cfg.max_damping_trials`` helps or
    when the accepted step would move the rendered points by less than
    ``cfg.min_step_px`` on average (the view counts as converged).
    """
    upd = lm_step(prob, cfg.lm_mode)
    for _ in range(cfg.max_damping_trials):
        if upd.residual_norm_after <= upd.residual_norm_before:
            break
        upd = lm_step(replace(prob, damping=10.0 * upd.damping), cfg.lm_mode)
    if upd.residual_norm_after > upd.residual_norm_before:
        return None
    if step_pixels(prob, upd.twist) < cfg.min_step_px:
        return None
    return upd


def step_pixels(prob: AlignmentProblem, twist) -> float:
    """Mean image displacement of the rendered points under ``twist``."""
    moved = warp(prob.points, twist)
    K = prob.K
    uv = np.stack([K.fx * moved[:, 0] / moved[:, 2] + K.cx, K.fy * moved[:, 1] / moved[:, 2] + K.cy], axis=1)
    return float(np.mean(np.linalg.norm(uv - prob.pixels, axis=1)))


def view_problem(grid: SdfGrid, pose: Pose, observed: FeatureMap, K, cfg: AlternationConfig,
                 prior: Pose | None = None) -> AlignmentProblem:
    """Alignment of ``grid`` rendered at ``pose`` against one observed view."""
    out = render(grid, pose, K, cfg.render)
    rendered = analytic_feature_extractor(shade(grid, out, LIGHT_DIR), out.mask, out.depth, cfg.features)
    return AlignmentProblem(
        observed, rendered, out.pixels, out.camera_points(K), K,
        damping=cfg.damping, prior_weight=cfg.prior_weight if prior is not None else 0.0,
        prior_pose=prior, current_pose=pose,
    )


class Optimizer:
    """Runs the alternation on one scene and keeps instrumentation counters."""

    def __init__(self, scene: Scene, cfg: AlternationConfig = AlternationConfig()):
        if len(scene.views) < 2:
            raise FewViewError("joint optimisation needs at least two views")
        self.scene = scene
        self.cfg = cfg
        self.trace = Trace()
        self._observed = [
            analytic_feature_extractor(v.intensity, v.mask, v.depth, cfg.features) for v in scene.views
        ]
        self._samples = scene.gt_mesh.vertices

    def shape_update(self, poses) -> SdfGrid:
        self.trace.shape_updates += 1
        return fuse_tsdf(self.scene.with_poses(poses), self.cfg.fusion)

    def pose_update(self, grid: SdfGrid, poses: list[Pose], priors: list[Pose], failures: list[str], tag: str):
        """One LM step per view against a fresh render.

        Returns (before, after) residual norms per view, ``None`` for views
        whose update failed or was rejected.
        """
        self.trace.pose_updates += 1
        cfg = self.cfg
        K = self.scene.K
        norms = []
        for i, pose in enumerate(poses):
            try:
                prob = view_problem(grid, pose, self._observed[i], K, cfg, priors[i])
                upd = _damped_step(prob, cfg)
            except FewViewError as exc:
                failures.append(f"{tag} view={i}: {type(exc).__name__}: {exc}")
                log.debug("pose update skipped: %s view=%d: %s", tag, i, exc)
                norms.append(None)
                continue
            if upd is not None:
                poses[i] = apply_update(pose, upd.twist)
                norms.append((upd.residual_norm_before, upd.residual_norm_after))
            else:
                norms.append(None)
        return norms

    def record(self, t: int, grid: SdfGrid, poses, residuals, failures) -> IterationRecord:
        rec = IterationRecord(t, list(poses), residuals=residuals, failures=failures)
        if self.scene.gt_poses:
            rec.pixel_error, rec.rotation_error, rec.translation_error = _pose_stats(self.scene, poses, self._samples)
        if self.cfg.shape_metrics:
            rec.shape = evaluate_grid(self.scene, grid, self.cfg)
        self.trace.records.append(rec)
        return rec

    def run(self, init_poses) -> Reconstruction:
        init = list(init_poses)
        if len(init) != len(self.scene.views):
            raise FewViewError("one initial pose per view is required")
        for p in init:
            if not (np.all(np.isfinite(p.rotation)) and np.all(np.isfinite(p.translation))):
                raise FewViewError("initial poses must be finite")
        poses = list(init)
        grid = self.shape_update(poses)
        self.record(0, grid, poses, [], [])
        for t in range(self.cfg.n1):
            residuals: list[list[tuple[float, float] | None]] = []
            failures: list[str] = []
            for j in range(self.cfg.n2):
                residuals.append(self.pose_update(grid, poses, init, failures, f"outer={t} inner={j}"))
            if self.cfg.anchor_gauge:
                poses = anchor_gauge(poses, init)
            grid = self.shape_update(poses)
            self.record(t + 1, grid, poses, residuals, failures)
        return Reconstruction(grid, poses, self.trace)


def reconstruct(scene: Scene, init_poses, cfg: AlternationConfig = AlternationConfig()) -> Reconstruction:
    return Optimizer(scene, cfg).run(init_poses)


def reconstruct_no_joint(scene: Scene, init_poses, cfg: AlternationConfig = AlternationConfig()) -> tuple[SdfGrid, list[Pose]]:
    """Single shape update at the initial poses; poses returned unchanged."""
    poses = list(init_poses)
    if not poses or not scene.views:
        raise FewViewError("reconstruction needs at least one view")
    return fuse_tsdf(scene.with_poses(poses), cfg.fusion), poses
