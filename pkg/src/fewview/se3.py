"""Rigid-body algebra and the pinhole camera model.

Poses are stored camera-to-world: ``x_world = R @ x_cam + t``. Twists are
split into a rotation vector and a translation vector, and the exponential
map used for pose corrections is the *decoupled* one,

    exp(dc, dt) = [[expm(hat(dc)), dt], [0, 1]]

i.e. rotation and translation are applied independently rather than through
the coupled SE(3) exponential with its left-Jacobian V-matrix.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AngleNearPi, BehindCamera, NonPositiveDepth

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-6
MIN_DEPTH = 1e-9


def skew(v) -> np.ndarray:
    """Hat operator: 3-vector to its cross-product matrix."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]], dtype=float)


def rodrigues(rot_vec) -> np.ndarray:
    """Rotation matrix ``expm(hat(rot_vec))``."""
    w = np.asarray(rot_vec, dtype=float).reshape(3)
    theta = math.sqrt(float(w @ w))
    W = skew(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R``; raises :class:`AngleNearPi` close to pi."""
    R = np.asarray(R, dtype=float)
    axis2 = vee(R - R.T)  # 2 sin(theta) * axis
    s = 0.5 * float(np.linalg.norm(axis2))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    theta = math.atan2(s, c)
    if theta >= math.pi - NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta:.9f} too close to pi")
    if theta < SMALL_ANGLE:
        # theta / (2 sin theta) ~ 1/2 (1 + theta^2 / 6)
        return 0.5 * (1.0 + theta * theta / 6.0) * axis2
    return theta / (2.0 * s) * axis2


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense (SVD projection)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Twist:
    """Tangent-space increment: rotation vector (rad) and translation."""

    rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rot", _frozen(np.reshape(self.rot, 3)))
        object.__setattr__(self, "trans", _frozen(np.reshape(self.trans, 3)))

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=float).reshape(6)
        return cls(xi[:3], xi[3:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rot, self.trans])

    def norm(self) -> float:
        return float(np.linalg.norm(self.as_vector()))


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(np.reshape(self.rotation, (3, 3))))
        object.__setattr__(self, "translation", _frozen(np.reshape(self.translation, 3)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self @ other``: apply ``other`` first, then ``self``."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def apply(self, points) -> np.ndarray:
        """Transform ``(..., 3)`` points by this pose."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera centre in world coordinates (for camera-to-world poses)."""
        return np.array(self.translation)

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.rotation), self.translation)

    def to_json(self) -> dict:
        return {
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_json(cls, obj) -> "Pose":
        if isinstance(obj, str):
            obj = json.loads(obj)
        return cls(np.reshape(obj["rotation"], (3, 3)), obj["translation"])


def exp_map(xi: Twist) -> Pose:
    """Decoupled exponential: Rodrigues rotation, translation taken as is."""
    return Pose(rodrigues(xi.rot), xi.trans)


def log_map(p: Pose) -> Twist:
    """Inverse of :func:`exp_map`."""
    return Twist(rotation_log(p.rotation), p.translation)


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * float(np.linalg.norm(vee(R - R.T)))
    c = 0.5 * (float(np.trace(R)) - 1.0)
    return math.atan2(s, c)


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        """Image shape as ``(height, width)``."""
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def inverse_matrix(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Intrinsics":
        return cls(
            float(obj["fx"]), float(obj["fy"]), float(obj["cx"]), float(obj["cy"]),
            int(obj["width"]), int(obj["height"]),
        )


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project_points(points, pose: Pose, K: Intrinsics):
    """Vectorised projection of world points; never raises.

    Returns ``(uv, depth)`` with ``uv`` of shape ``(N, 2)``. Points with
    ``depth <= MIN_DEPTH`` get ``nan`` pixel coordinates.
    """
    cam = pose.inverse().apply(np.atleast_2d(points))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ok = z > MIN_DEPTH
        zs = np.where(ok, z, np.nan)
        u = K.fx * cam[:, 0] / zs + K.cx
        v = K.fy * cam[:, 1] / zs + K.cy
    return np.stack([u, v], axis=1), z


def project(x_world, pose: Pose, K: Intrinsics) -> tuple[float, float, float]:
    """Project one world point; returns ``(u, v, depth)``."""
    uv, z = project_points(np.reshape(x_world, (1, 3)), pose, K)
    if not z[0] > MIN_DEPTH:
        raise BehindCamera(f"point has camera depth {z[0]:.3g}")
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def camera_rays(u, v, K: Intrinsics) -> np.ndarray:
    """``K^-1 (u, v, 1)`` for arrays of pixel coordinates; shape ``(..., 3)``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    x = (u - K.cx) / K.fx
    y = (v - K.cy) / K.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def back_project_points(u, v, depth, pose: Pose, K: Intrinsics) -> np.ndarray:
    """Vectorised back-projection to world points; depth must be positive."""
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("back-projection needs positive depth")
    cam = camera_rays(u, v, K) * depth[..., None]
    return pose.apply(cam)


def back_project(u: float, v: float, depth: float, pose: Pose, K: Intrinsics) -> np.ndarray:
    if not depth > 0:
        raise NonPositiveDepth(f"depth {depth} is not positive")
    return back_project_points(np.array([u]), np.array([v]), np.array([depth]), pose, K)[0]


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose for a camera at ``eye`` looking at ``target``.

    Camera axes follow the x-right, y-down, z-forward convention.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)
