"""Compiled per-ray sphere-tracing kernel.

Mirrors :func:`fewview.sdf.sample` and the vectorised march in
:mod:`fewview.render` operation for operation, so both paths agree to
floating-point round-off.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_SNAP = 1e-9


@numba.njit(cache=True, inline="always")
def _axis(c, o, vs, d):
    g = (c - o) / vs
    r = np.round(g)
    if abs(g - r) < _SNAP:
        g = r
    g = min(max(g, 0.0), d - 1.0)
    i = min(int(math.floor(g)), d - 2)
    return i, g - i


@numba.njit(cache=True)
def _sample_point(values, origin, vs, lo, hi, x, y, z):
    d = values.shape[0]
    cx = min(max(x, lo[0]), hi[0])
    cy = min(max(y, lo[1]), hi[1])
    cz = min(max(z, lo[2]), hi[2])
    i, fx = _axis(cx, origin[0], vs, d)
    j, fy = _axis(cy, origin[1], vs, d)
    k, fz = _axis(cz, origin[2], vs, d)
    c000 = values[i, j, k]
    c100 = values[i + 1, j, k]
    c010 = values[i, j + 1, k]
    c110 = values[i + 1, j + 1, k]
    c001 = values[i, j, k + 1]
    c101 = values[i + 1, j, k + 1]
    c011 = values[i, j + 1, k + 1]
    c111 = values[i + 1, j + 1, k + 1]
    c00 = c000 + (c100 - c000) * fx
    c10 = c010 + (c110 - c010) * fx
    c01 = c001 + (c101 - c001) * fx
    c11 = c011 + (c111 - c011) * fx
    c0 = c00 + (c10 - c00) * fy
    c1 = c01 + (c11 - c01) * fy
    val = c0 + (c1 - c0) * fz
    dx, dy, dz = x - cx, y - cy, z - cz
    out = math.sqrt(dx * dx + dy * dy + dz * dz)
    if out > 0:
        val = val + out
    return val


@numba.njit(cache=True)
def march(values, origin, vs, lo, hi, eye, dirs, lens, s_start, s_end, safety, eps, max_steps):
    """Hit depth per ray (``inf`` for misses)."""
    n = dirs.shape[0]
    depth = np.full(n, np.inf)
    for r in range(n):
        s = s_start[r]
        s_prev = np.nan
        f_prev = np.nan
        for _ in range(max_steps):
            f = _sample_point(values, origin, vs, lo, hi,
                              eye[0] + s * dirs[r, 0], eye[1] + s * dirs[r, 1], eye[2] + s * dirs[r, 2])
            if abs(f) < eps or f < 0:
                secant = s - f * (s - s_prev) / (f - f_prev)
                if math.isfinite(secant) and secant >= s_prev and secant <= s + (s - s_prev):
                    depth[r] = secant
                else:
                    depth[r] = s
                break
            s_prev = s
            f_prev = f
            s = s + safety * f / lens[r]
            if not s <= s_end[r]:
                break
    return depth
