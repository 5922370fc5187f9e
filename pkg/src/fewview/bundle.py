"""On-disk scene bundles and image files.

A bundle directory holds::

    scene.json          shape, intrinsics, GT poses, file names, seed
    gt_grid.sdfg        ground-truth SDF grid
    view_XX.dpth        float32 depth, inf marks a miss
    view_XX_intensity.png   16-bit shaded intensity
    view_XX_mask.png    8-bit silhouette (inspection only; the mask is
                        re-derived from the depth on load)
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import IoError
from .scenes import Scene, ViewObservation
from .sdf import load_grid, save_grid
from .se3 import Intrinsics, Pose

_DEPTH_HEADER = struct.Struct("<4sII")


# ---------------------------------------------------------------------------
# raw files
# ---------------------------------------------------------------------------

def save_depth(depth: np.ndarray, path) -> None:
    """``DPTH`` binary: magic, u32 h, u32 w, then ``h*w`` little-endian f32."""
    h, w = depth.shape
    Path(path).write_bytes(_DEPTH_HEADER.pack(b"DPTH", h, w) + np.asarray(depth, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    raw = _read(path)
    if len(raw) < _DEPTH_HEADER.size:
        raise IoError(path, "truncated DPTH header")
    magic, h, w = _DEPTH_HEADER.unpack_from(raw, 0)
    if magic != b"DPTH":
        raise IoError(path, "not a DPTH file")
    if len(raw) != _DEPTH_HEADER.size + 4 * h * w:
        raise IoError(path, f"expected {h}x{w} depths")
    return np.frombuffer(raw, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w).astype(float)


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise IoError(path, exc.strerror or str(exc)) from exc


def save_png16(img: np.ndarray, path) -> None:
    """Values in [0, 1] as a 16-bit grayscale PNG."""
    q = np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path, format="PNG")


def load_png16(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im, dtype=float) / 65535.0
    except OSError as exc:
        raise IoError(path, str(exc)) from exc


def save_mask_png(mask: np.ndarray, path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PNG")


def save_depth_png(depth: np.ndarray, path) -> None:
    """16-bit normalised depth; near -> 1, far -> 65535, miss -> 0."""
    finite = np.isfinite(depth)
    out = np.zeros(depth.shape, dtype=np.uint16)
    if np.any(finite):
        lo, hi = depth[finite].min(), depth[finite].max()
        span = hi - lo if hi > lo else 1.0
        out[finite] = 1 + np.round((depth[finite] - lo) / span * 65534.0).astype(np.uint16)
    Image.fromarray(out).save(path, format="PNG")


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# bundles
# ---------------------------------------------------------------------------

def save_scene(scene: Scene, directory) -> list[Path]:
    """Write ``scene`` into ``directory``; returns the files written."""
    d = Path(directory)
    try:
        d.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(d, exc.strerror or str(exc)) from exc
    written = []
    views = []
    try:
        for i, v in enumerate(scene.views):
            names = {"depth": f"view_{i:02d}.dpth", "intensity": f"view_{i:02d}_intensity.png",
                     "mask": f"view_{i:02d}_mask.png"}
            save_depth(v.depth, d / names["depth"])
            save_png16(v.intensity, d / names["intensity"])
            save_mask_png(v.mask, d / names["mask"])
            views.append(names)
            written += [d / n for n in names.values()]
        save_grid(scene.gt_grid, d / "gt_grid.sdfg")
        written.append(d / "gt_grid.sdfg")
        meta = {
            "seed": scene.seed,
            "shape": scene.shape,
            "intrinsics": scene.K.to_json(),
            "gt_poses": [p.to_json() for p in scene.gt_poses],
            "views": views,
            "grid": "gt_grid.sdfg",
        }
        write_json(meta, d / "scene.json")
    except OSError as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(getattr(exc, "filename", None) or d, exc.strerror or str(exc)) from exc
    written.append(d / "scene.json")
    return written


def load_scene(directory) -> Scene:
    d = Path(directory)
    meta_path = d / "scene.json"
    try:
        meta = json.loads(_read(meta_path))
    except json.JSONDecodeError as exc:
        raise IoError(meta_path, f"invalid JSON: {exc}") from exc
    try:
        K = Intrinsics.from_json(meta["intrinsics"])
        gt_poses = [Pose.from_json(p) for p in meta["gt_poses"]]
        views = []
        for names, pose in zip(meta["views"], gt_poses):
            depth = load_depth(d / names["depth"])
            intensity = load_png16(d / names["intensity"])
            views.append(ViewObservation(intensity, depth, np.isfinite(depth), K, pose))
        grid_path = d / meta["grid"]
        _read(grid_path)
        grid = load_grid(grid_path)
        return Scene(meta["shape"], grid, views, gt_poses, K, int(meta["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise IoError(meta_path, f"malformed scene bundle: {exc}") from exc
