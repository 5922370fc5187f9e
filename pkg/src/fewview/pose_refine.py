"""One damped Gauss-Newton (Levenberg-Marquardt) step of feature alignment.

Rendered surface points ``p_j = d_j K^-1 (u_j, v_j, 1)`` live in the frame of
the current camera estimate. A twist ``(dc, dt)`` warps them linearly,
``p' = (I + [dc]x) p + dt``, into the frame of the observed camera, and the
residual compares observed features at the projection of ``p'`` with
rendered features at ``(u_j, v_j)``. Solving for the twist therefore
estimates the world-to-camera correction ``T_obs = dT @ T_cur`` (both
world-to-camera); :func:`apply_update` converts that back to the
camera-to-world poses used everywhere else.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LengthMismatch, SingularSystem, TooFewPoints
from .features import FeatureMap
from .se3 import Intrinsics, Pose, Twist, exp_map, log_map, skew

MIN_POINTS = 6
MARGIN_PX = 1.0
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class AlignmentProblem:
    observed: FeatureMap
    rendered: FeatureMap
    pixels: np.ndarray   # (n, 2) rendered pixel coordinates (u, v)
    points: np.ndarray   # (n, 3) camera-frame points of the render
    K: Intrinsics
    damping: float | None = None   # None -> scale-aware default
    prior_weight: float = 0.0
    prior_pose: Pose | None = None
    current_pose: Pose | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(px) != len(pts):
            raise LengthMismatch(f"{len(px)} pixels vs {len(pts)} points")
        if np.any(pts[:, 2] <= 0):
            raise ValueError("alignment points must have positive depth")
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class LmUpdate:
    twist: Twist
    residual_norm_before: float
    residual_norm_after: float
    num_points_used: int
    damping: float


def warp(points: np.ndarray, twist: Twist) -> np.ndarray:
    """Linearised rigid warp ``(I + [dc]x) p + dt``."""
    return points + np.cross(twist.rot, points) + twist.trans


def _project(K: Intrinsics, p: np.ndarray) -> np.ndarray:
    z = p[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.stack([K.fx * p[:, 0] / z + K.cx, K.fy * p[:, 1] / z + K.cy], axis=1)


def projection_jacobian(K: Intrinsics, p: np.ndarray) -> np.ndarray:
    """``d(u, v)/dp`` of the pinhole projection, shape ``(n, 2, 3)``."""
    p = np.atleast_2d(p)
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((len(p), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    return J


def warp_jacobian(p: np.ndarray) -> np.ndarray:
    """``dp'/d(dc, dt) = [-[p]x | I]``, shape ``(n, 3, 6)``."""
    p = np.atleast_2d(p)
    J = np.zeros((len(p), 3, 6))
    J[:, 0, 1], J[:, 0, 2] = p[:, 2], -p[:, 1]
    J[:, 1, 0], J[:, 1, 2] = -p[:, 2], p[:, 0]
    J[:, 2, 0], J[:, 2, 1] = p[:, 1], -p[:, 0]
    J[:, :, 3:] = np.eye(3)
    return J


def _warped_pixels(prob: AlignmentProblem, twist: Twist):
    pw = warp(prob.points, twist)
    uv = _project(prob.K, pw)
    valid = (pw[:, 2] > 1e-9) & prob.observed.in_bounds(uv[:, 0], uv[:, 1], MARGIN_PX)
    return pw, uv, valid


def residuals(prob: AlignmentProblem, twist: Twist = Twist()):
    """Residuals of all points, ``(n, c)``, and the in-bounds mask.

    Out-of-bounds rows hold ``nan``.
    """
    _, uv, valid = _warped_pixels(prob, twist)
    r = np.full((len(prob), prob.observed.channels), np.nan)
    if np.any(valid):
        obs = prob.observed.sample(uv[valid, 0], uv[valid, 1])
        ren = prob.rendered.sample(prob.pixels[valid, 0], prob.pixels[valid, 1])
        r[valid] = obs - ren
    return r, valid


def residual(prob: AlignmentProblem, j: int, twist: Twist = Twist()) -> np.ndarray | None:
    """Residual of point ``j``; ``None`` when its warp leaves the image."""
    sub = AlignmentProblem(prob.observed, prob.rendered, prob.pixels[j:j + 1], prob.points[j:j + 1], prob.K)
    r, valid = residuals(sub, twist)
    return r[0] if valid[0] else None


def jacobians(prob: AlignmentProblem, twist: Twist = Twist()):
    """Per-point ``(c, 6)`` Jacobians of the residuals and the in-bounds mask."""
    pw, uv, valid = _warped_pixels(prob, twist)
    J = np.full((len(prob), prob.observed.channels, 6), np.nan)
    if np.any(valid):
        g_feat = prob.observed.spatial_gradient(uv[valid, 0], uv[valid, 1])   # (n, c, 2)
        g_proj = projection_jacobian(prob.K, pw[valid])                        # (n, 2, 3)
        g_warp = warp_jacobian(prob.points[valid])                             # (n, 3, 6)
        J[valid] = (g_feat @ g_proj) @ g_warp
    return J, valid


def jacobian(prob: AlignmentProblem, j: int, twist: Twist = Twist()) -> np.ndarray | None:
    sub = AlignmentProblem(prob.observed, prob.rendered, prob.pixels[j:j + 1], prob.points[j:j + 1], prob.K)
    J, valid = jacobians(sub, twist)
    return J[0] if valid[0] else None


def _rms(r: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum(r * r, axis=1)))) if len(r) else 0.0


def prior_twist(current: Pose, prior: Pose) -> np.ndarray:
    """Twist whose update (see :func:`apply_update`) maps ``current`` onto ``prior``."""
    return log_map(prior.inverse() @ current).as_vector()


def lm_step(prob: AlignmentProblem, mode: str = "stacked") -> LmUpdate:
    """Solve ``(H + lambda I + mu I) xi = -g + mu xi_prior`` once.

    ``mu`` is ``prior_weight`` times ``trace(H) / 6`` so the prior weight is
    independent of the feature units.

    ``mode="stacked"`` accumulates ``H = sum J_j^T J_j`` and
    ``g = sum J_j^T r_j``. ``mode="summed"`` instead forms ``r = sum r_j`` and
    ``J = sum J_j`` before building the normal equations; it exists for
    comparison only and is badly conditioned for real problems.
    """
    J_all, valid = jacobians(prob)
    n = int(valid.sum())
    if n < MIN_POINTS:
        raise TooFewPoints(f"{n} in-bounds points, need {MIN_POINTS}")
    J = np.ascontiguousarray(J_all[valid])
    r_all, _ = residuals(prob)
    r = np.ascontiguousarray(r_all[valid])

    if mode == "stacked":
        H = np.einsum("nci,ncj->ij", J, J)
        g = np.einsum("nci,nc->i", J, r)
    elif mode == "summed":
        Js, rs = J.sum(axis=0), r.sum(axis=0)
        H = Js.T @ Js
        g = Js.T @ rs
    else:
        raise ValueError(f"unknown mode {mode!r}")

    scale = np.trace(H) / 6.0
    lam = prob.damping if prob.damping is not None else 1e-3 * scale
    A = H + lam * np.eye(6)
    b = -g
    if prob.prior_weight > 0:
        if prob.prior_pose is None or prob.current_pose is None:
            raise ValueError("prior term needs prior_pose and current_pose")
        mu = prob.prior_weight * scale
        A = A + mu * np.eye(6)
        b = b + mu * prior_twist(prob.current_pose, prob.prior_pose)
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > MAX_CONDITION:
        raise SingularSystem("damped normal equations are singular")
    xi = np.linalg.solve(A, b)
    twist = Twist.from_vector(xi)

    before = _rms(r)
    r_after, valid_after = residuals(prob, twist)
    after = _rms(r_after[valid & valid_after])
    return LmUpdate(twist, before, after, n, float(lam))


def apply_update(pose: Pose, twist: Twist) -> Pose:
    """Camera-to-world pose after the correction ``T_w2c <- exp(xi) T_w2c``."""
    return pose @ exp_map(twist).inverse()


def linearized_correction(twist: Twist) -> np.ndarray:
    """4x4 matrix ``[[I + [dc]x, dt], [0, 1]]``."""
    M = np.eye(4)
    M[:3, :3] += skew(twist.rot)
    M[:3, 3] = twist.trans
    return M


def pose_refine_loss(
    twists: Sequence[Twist],
    initial_poses: Sequence[Pose],
    gt_poses: Sequence[Pose],
    frame: str = "world_to_camera",
) -> float:
    """Sum of squared Frobenius distances between corrected and true poses.

    Each term is ``|| [I + [dc]x | dt] @ T0 - T_gt ||_F^2`` on 4x4 matrices.
    ``frame`` selects whether ``T0``/``T_gt`` are taken world-to-camera
    (consistent with :func:`apply_update`) or as the stored camera-to-world
    matrices.
    """
    if not (len(twists) == len(initial_poses) == len(gt_poses)):
        raise LengthMismatch(f"{len(twists)} updates, {len(initial_poses)} poses, {len(gt_poses)} targets")
    if frame not in ("world_to_camera", "camera_to_world"):
        raise ValueError(f"unknown frame {frame!r}")
    total = 0.0
    for tw, p0, pg in zip(twists, initial_poses, gt_poses):
        if frame == "world_to_camera":
            p0, pg = p0.inverse(), pg.inverse()
        D = linearized_correction(tw) @ p0.matrix() - pg.matrix()
        total += float(np.sum(D * D))
    return total


def perturbation_twist(rng: np.random.Generator, rot_max: float = 0.05, trans_max: float = 0.05) -> Twist:
    """Random twist with ``|dc| <= rot_max`` and ``|dt| <= trans_max``."""
    def ball(radius):
        d = rng.normal(size=3)
        return d / np.linalg.norm(d) * radius * rng.uniform() ** (1 / 3)
    return Twist(ball(rot_max), ball(trans_max))

