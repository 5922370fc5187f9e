"""Dense feature maps with bilinear sampling, and a hand-built extractor.

The extractor stands in for a learned descriptor network: it produces
smooth channels (blurred silhouette, blurred nearness, intensity
derivatives) so that small misalignments give informative residuals.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DimensionMismatch


@dataclass(frozen=True)
class FeatureMap:
    data: np.ndarray  # (c, h, w)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim == 2:
            d = d[None]
        if d.ndim != 3 or d.shape[1] < 2 or d.shape[2] < 2:
            raise DimensionMismatch(f"feature data must be (c, h, w), got {d.shape}")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def _cells(self, u, v):
        h, w = self.shape
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        u0 = np.clip(np.floor(u), 0, w - 2).astype(np.intp)
        v0 = np.clip(np.floor(v), 0, h - 2).astype(np.intp)
        return u0, v0, u - u0, v - v0

    def in_bounds(self, u, v, margin: float = 0.0) -> np.ndarray:
        h, w = self.shape
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        return (u >= margin) & (u <= w - 1 - margin) & (v >= margin) & (v <= h - 1 - margin)

    def sample(self, u, v) -> np.ndarray:
        """Bilinear samples, shape ``(n, c)``. Callers keep (u, v) in bounds."""
        u0, v0, fu, fv = self._cells(u, v)
        D = self.data
        a, b = D[:, v0, u0], D[:, v0, u0 + 1]
        c, d = D[:, v0 + 1, u0], D[:, v0 + 1, u0 + 1]
        top = a + (b - a) * fu
        bot = c + (d - c) * fu
        return (top + (bot - top) * fv).T

    def sample_padded(self, u, v) -> np.ndarray:
        """Like :meth:`sample` but zero outside the image (diagnostics only)."""
        out = self.sample(np.clip(u, 0, self.shape[1] - 1), np.clip(v, 0, self.shape[0] - 1))
        return np.where(self.in_bounds(u, v)[:, None], out, 0.0)

    def spatial_gradient(self, u, v) -> np.ndarray:
        """Derivatives of the bilinear interpolant, shape ``(n, c, 2)`` as (d/du, d/dv)."""
        u0, v0, fu, fv = self._cells(u, v)
        D = self.data
        a, b = D[:, v0, u0], D[:, v0, u0 + 1]
        c, d = D[:, v0 + 1, u0], D[:, v0 + 1, u0 + 1]
        du = (b - a) * (1 - fv) + (d - c) * fv
        dv = (c - a) * (1 - fu) + (d - b) * fu
        return np.stack([du.T, dv.T], axis=-1)


@dataclass(frozen=True)
class FeatureConfig:
    blur_sigma: float = 4.0
    gradient_sigma: float = 2.0
    near: float = 0.5
    far: float = 2.5
    weights: tuple[float, float, float, float] = (1.0, 1.0, 4.0, 4.0)


def analytic_feature_extractor(intensity, mask, depth, cfg: FeatureConfig = FeatureConfig()) -> FeatureMap:
    """Four channels: blurred mask, blurred nearness, d/dx and d/dy of intensity.

    Nearness is ``(far - depth) / (far - near)`` clipped to [0, 1] on the mask
    and 0 elsewhere, so an empty view maps to all-zero features.
    """
    intensity = np.asarray(intensity, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    depth = np.asarray(depth, dtype=float)
    if not (intensity.shape == mask.shape == depth.shape):
        raise DimensionMismatch(f"{intensity.shape}, {mask.shape}, {depth.shape}")
    m = mask.astype(float)
    with np.errstate(invalid="ignore"):
        near = np.where(mask, np.clip((cfg.far - depth) / (cfg.far - cfg.near), 0.0, 1.0), 0.0)
    wm, wn, wx, wy = cfg.weights
    chans = [
        wm * gaussian_filter(m, cfg.blur_sigma, mode="constant"),
        wn * gaussian_filter(near, cfg.blur_sigma, mode="constant"),
        wx * gaussian_filter(intensity, cfg.gradient_sigma, order=(0, 1), mode="constant"),
        wy * gaussian_filter(intensity, cfg.gradient_sigma, order=(1, 0), mode="constant"),
    ]
    return FeatureMap(np.stack(chans))
