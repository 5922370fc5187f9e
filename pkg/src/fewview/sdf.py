"""Voxelised signed-distance volumes.

A grid stores ``d**3`` signed distances (negative inside) at voxel centres
``origin + voxel_size * (i, j, k)``; index ``i`` runs along world x. Queries
use trilinear interpolation; queries outside the grid box return the value
at the nearest box point plus the distance to the box, which keeps the field
positive away from the object.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoCrossing, OutsideInterior, UnknownPrimitive

DEFAULT_BOUNDS = (-0.55, 0.55)
DEFAULT_RESOLUTION = 64
_SNAP = 1e-9


@dataclass(frozen=True)
class SdfGrid:
    values: np.ndarray
    origin: np.ndarray
    voxel_size: float

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 3 or len(set(vals.shape)) != 1:
            raise ValueError(f"grid values must be a cube, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("grid values must be finite")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        vals.setflags(write=False)
        origin = np.array(self.origin, dtype=float).reshape(3)
        origin.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def box_min(self) -> np.ndarray:
        return self.origin

    @property
    def box_max(self) -> np.ndarray:
        return self.origin + self.voxel_size * (self.resolution - 1)

    def voxel_centers(self) -> np.ndarray:
        """All voxel centres as a ``(d, d, d, 3)`` array."""
        ax = self.origin[0] + self.voxel_size * np.arange(self.resolution)
        ay = self.origin[1] + self.voxel_size * np.arange(self.resolution)
        az = self.origin[2] + self.voxel_size * np.arange(self.resolution)
        return np.stack(np.meshgrid(ax, ay, az, indexing="ij"), axis=-1)

    def with_values(self, values) -> "SdfGrid":
        return SdfGrid(values, self.origin, self.voxel_size)

    def sample(self, x) -> np.ndarray | float:
        return sample(self, x)


def make_grid_spec(resolution: int = DEFAULT_RESOLUTION, bounds=DEFAULT_BOUNDS):
    """Origin and voxel size for a cubic grid spanning ``bounds`` per axis."""
    lo, hi = bounds
    voxel_size = (hi - lo) / (resolution - 1)
    return np.full(3, float(lo)), float(voxel_size)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def _cell_coords(grid: SdfGrid, pts: np.ndarray):
    d = grid.resolution
    g = (pts - grid.origin) / grid.voxel_size
    r = np.round(g)
    g = np.where(np.abs(g - r) < _SNAP, r, g)
    g = np.clip(g, 0.0, d - 1)
    i0 = np.minimum(np.floor(g).astype(np.intp), d - 2)
    return i0, g - i0


def _corners(values: np.ndarray, i0: np.ndarray):
    i, j, k = i0[:, 0], i0[:, 1], i0[:, 2]
    return (
        values[i, j, k], values[i + 1, j, k], values[i, j + 1, k], values[i + 1, j + 1, k],
        values[i, j, k + 1], values[i + 1, j, k + 1], values[i, j + 1, k + 1],
        values[i + 1, j + 1, k + 1],
    )


def trilinear(values: np.ndarray, i0: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of ``values`` (``(d,d,d)`` or ``(d,d,d,c)``)."""
    c000, c100, c010, c110, c001, c101, c011, c111 = _corners(values, i0)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    if values.ndim == 4:
        fx, fy, fz = fx[:, None], fy[:, None], fz[:, None]
    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    return c0 + (c1 - c0) * fz


def sample(grid: SdfGrid, x) -> np.ndarray | float:
    """Signed distance at ``x`` (a 3-vector or ``(..., 3)`` array)."""
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    inside_box = np.clip(pts, grid.box_min, grid.box_max)
    i0, frac = _cell_coords(grid, inside_box)
    val = trilinear(grid.values, i0, frac)
    outside = np.linalg.norm(pts - inside_box, axis=1)
    val = np.where(outside > 0, val + outside, val)
    if x.ndim == 1:
        return float(val[0])
    return val.reshape(x.shape[:-1])


def _gradient_cells(grid: SdfGrid, i0, frac) -> np.ndarray:
    c000, c100, c010, c110, c001, c101, c011, c111 = _corners(grid.values, i0)
    fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
    gx = (
        (1 - fy) * (1 - fz) * (c100 - c000) + fy * (1 - fz) * (c110 - c010)
        + (1 - fy) * fz * (c101 - c001) + fy * fz * (c111 - c011)
    )
    gy = (
        (1 - fx) * (1 - fz) * (c010 - c000) + fx * (1 - fz) * (c110 - c100)
        + (1 - fx) * fz * (c011 - c001) + fx * fz * (c111 - c101)
    )
    gz = (
        (1 - fx) * (1 - fy) * (c001 - c000) + fx * (1 - fy) * (c101 - c100)
        + (1 - fx) * fy * (c011 - c010) + fx * fy * (c111 - c110)
    )
    return np.stack([gx, gy, gz], axis=1) / grid.voxel_size


def gradient_unchecked(grid: SdfGrid, pts) -> np.ndarray:
    """Trilinear-interpolant gradient with points clamped into the grid box."""
    pts = np.clip(np.asarray(pts, dtype=float).reshape(-1, 3), grid.box_min, grid.box_max)
    i0, frac = _cell_coords(grid, pts)
    return _gradient_cells(grid, i0, frac)


def gradient(grid: SdfGrid, x) -> np.ndarray:
    """Analytic gradient of the trilinear interpolant.

    Points must keep at least one voxel of margin to the grid boundary.
    """
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    lo = grid.box_min + grid.voxel_size
    hi = grid.box_max - grid.voxel_size
    if np.any(pts < lo) or np.any(pts > hi):
        raise OutsideInterior("gradient queried within one voxel of the grid boundary")
    i0, frac = _cell_coords(grid, pts)
    g = _gradient_cells(grid, i0, frac)
    return g[0] if x.ndim == 1 else g.reshape(x.shape)


# ---------------------------------------------------------------------------
# analytic primitives
# ---------------------------------------------------------------------------

def _sd_sphere(p, center, radius):
    return np.linalg.norm(p - np.asarray(center, dtype=float), axis=-1) - radius


def _sd_box(p, center, half_extents):
    q = np.abs(p - np.asarray(center, dtype=float)) - np.asarray(half_extents, dtype=float)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _sd_torus(p, center, major, minor):
    # ring lies in the xy-plane, symmetry axis along z
    q = p - np.asarray(center, dtype=float)
    ring = np.hypot(q[..., 0], q[..., 1]) - major
    return np.hypot(ring, q[..., 2]) - minor


def analytic_sdf(shape: dict, points) -> np.ndarray:
    """Evaluate a primitive / CSG spec at ``(..., 3)`` points.

    Supported ``type`` keys: ``sphere`` (center, radius), ``box`` (center,
    half_extents), ``torus`` (center, major, minor), ``union``,
    ``intersection`` (children), ``difference`` (children: [a, b] -> a - b)
    and ``smooth_union`` (children, k).
    """
    p = np.asarray(points, dtype=float)
    kind = shape.get("type")
    if kind == "sphere":
        return _sd_sphere(p, shape.get("center", (0, 0, 0)), float(shape["radius"]))
    if kind == "box":
        return _sd_box(p, shape.get("center", (0, 0, 0)), shape["half_extents"])
    if kind == "torus":
        return _sd_torus(p, shape.get("center", (0, 0, 0)), float(shape["major"]), float(shape["minor"]))
    if kind in ("union", "intersection", "difference", "smooth_union"):
        children = [analytic_sdf(c, p) for c in shape["children"]]
        if not children:
            raise UnknownPrimitive(f"{kind} needs at least one child")
        if kind == "union":
            return np.minimum.reduce(children)
        if kind == "intersection":
            return np.maximum.reduce(children)
        if kind == "difference":
            out = children[0]
            for c in children[1:]:
                out = np.maximum(out, -c)
            return out
        k = float(shape.get("k", 0.05))
        out = children[0]
        for c in children[1:]:
            h = np.clip(0.5 + 0.5 * (c - out) / k, 0.0, 1.0)
            out = c + (out - c) * h - k * h * (1.0 - h)
        return out
    raise UnknownPrimitive(f"unknown primitive type {kind!r}")


def from_analytic(shape: dict, resolution: int = DEFAULT_RESOLUTION, bounds=DEFAULT_BOUNDS) -> SdfGrid:
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    origin, voxel_size = make_grid_spec(resolution, bounds)
    ax = origin[0] + voxel_size * np.arange(resolution)
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
    return SdfGrid(analytic_sdf(shape, pts), origin, voxel_size)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = field(default=None)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", f)
        if self.normals is not None:
            object.__setattr__(self, "normals", np.asarray(self.normals, dtype=float).reshape(-1, 3))

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, i]] for i in range(3))
        n = np.cross(b - a, c - a)
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def area(self) -> float:
        return float(self.triangle_areas().sum())


def extract_mesh(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Marching-cubes iso-surface in world coordinates.

    Vertex normals are the normalised SDF gradient, so they point outward.
    """
    from skimage.measure import marching_cubes

    vals = grid.values
    if not (vals.min() < iso < vals.max()):
        raise NoCrossing(f"grid has no crossing of level {iso}")
    verts, faces, _, _ = marching_cubes(
        vals, level=iso, spacing=(grid.voxel_size,) * 3, allow_degenerate=False
    )
    verts = verts.astype(float) + grid.origin
    mesh = TriangleMesh(verts, faces)
    keep = mesh.triangle_areas() > 1e-12
    faces = faces[keep]
    # drop vertices no longer referenced
    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    verts = verts[used]
    faces = remap[faces]
    n = gradient_unchecked(grid, verts)
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    # scikit-image winds faces towards increasing values, i.e. outward here
    return TriangleMesh(verts, faces, n)


def write_ply(mesh: TriangleMesh, path) -> None:
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if mesh.normals is not None:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    for i, v in enumerate(mesh.vertices):
        row = [f"{c:.9g}" for c in v]
        if mesh.normals is not None:
            row += [f"{c:.9g}" for c in mesh.normals[i]]
        lines.append(" ".join(row))
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(mesh: TriangleMesh, path) -> None:
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    if mesh.normals is not None:
        lines += [f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}" for n in mesh.normals]
        lines += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriangleMesh:
    """Reader for the ASCII PLY files produced by :func:`write_ply`."""
    text = Path(path).read_text().splitlines()
    n_vert = n_face = 0
    has_normals = False
    body = 0
    for idx, line in enumerate(text):
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        elif parts[:3] == ["property", "float", "nx"]:
            has_normals = True
        elif line.strip() == "end_header":
            body = idx + 1
            break
    vrows = np.array([[float(x) for x in l.split()] for l in text[body:body + n_vert]]).reshape(n_vert, -1)
    frows = np.array([[int(x) for x in l.split()[1:4]] for l in text[body + n_vert:body + n_vert + n_face]])
    normals = vrows[:, 3:6] if has_normals else None
    return TriangleMesh(vrows[:, :3], frows.reshape(-1, 3), normals)


# ---------------------------------------------------------------------------
# binary grid files
# ---------------------------------------------------------------------------

_GRID_HEADER = struct.Struct("<4sI3dd")


def save_grid(grid: SdfGrid, path) -> None:
    """Write ``SDFG`` binary: header then ``d**3`` float32, x fastest."""
    header = _GRID_HEADER.pack(b"SDFG", grid.resolution, *grid.origin, grid.voxel_size)
    body = np.asarray(grid.values, dtype="<f4").ravel(order="F").tobytes()
    Path(path).write_bytes(header + body)


def load_grid(path) -> SdfGrid:
    raw = Path(path).read_bytes()
    magic, d, ox, oy, oz, vs = _GRID_HEADER.unpack_from(raw, 0)
    if magic != b"SDFG":
        raise ValueError(f"{path}: not an SDFG file")
    vals = np.frombuffer(raw, dtype="<f4", offset=_GRID_HEADER.size, count=d ** 3)
    return SdfGrid(vals.reshape((d, d, d), order="F").astype(float), (ox, oy, oz), vs)
