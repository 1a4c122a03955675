"""Synthetic depth maps: smooth regions separated by sharp edges.

Each map is a Voronoi partition of affine ramps (depth-like content:
locally smooth surfaces meeting at depth discontinuities), with optional
invalid speckles set to the zero sentinel.
"""

from __future__ import annotations

import numpy as np

from .depth_io import DepthMap


def piecewise_smooth_map(rng: np.random.Generator, height: int, width: int,
                         bit_depth: int, regions: int = 6,
                         invalid_fraction: float = 0.02,
                         precision_um: int = 1000) -> DepthMap:
    top = (1 << bit_depth) - 1
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    seeds = np.stack(
        [rng.uniform(0, height, regions), rng.uniform(0, width, regions)], axis=1
    )
    d2 = (yy[None] - seeds[:, 0, None, None]) ** 2 + (xx[None] - seeds[:, 1, None, None]) ** 2
    label = d2.argmin(axis=0)

    base = rng.uniform(0.15 * top, 0.85 * top, regions)
    gy = rng.uniform(-0.3, 0.3, regions) * top / max(height, 64)
    gx = rng.uniform(-0.3, 0.3, regions) * top / max(width, 64)
    surface = base[label] + gy[label] * yy + gx[label] * xx

    vals = np.clip(np.floor(surface + 0.5), 1, top).astype(np.int64)
    mask = np.ones((height, width), dtype=bool)
    if invalid_fraction > 0:
        holes = rng.random((height, width)) < invalid_fraction
        mask &= ~holes
        vals[holes] = 0
    return DepthMap(vals, mask, bit_depth, precision_um)


def random_map(rng: np.random.Generator, height: int, width: int, bit_depth: int,
               invalid_fraction: float = 0.1, precision_um: int = 1000) -> DepthMap:
    """Uniform-random values with a random mask; worst-case codec input."""
    vals = rng.integers(1, 1 << bit_depth, size=(height, width), dtype=np.int64)
    mask = rng.random((height, width)) >= invalid_fraction
    vals[~mask] = 0
    return DepthMap(vals, mask, bit_depth, precision_um)
