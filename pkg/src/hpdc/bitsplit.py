"""Split high-bit-depth maps into coarse/fine integer planes and back.

A map with values x < 2^B and a divisor d becomes two planes:
msb = x // d and lsb = x mod d. Merging is exact: x = msb * d + lsb.
``pack_normalized`` scales both planes into [0, 1] for the networks; the
per-channel level counts are fully determined by (B, d), which the codec
stream header carries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth_io import DepthMap


class SplitError(ValueError):
    pass


def msb_levels(bit_depth: int, divisor: int) -> int:
    """Largest value the msb plane can take: floor((2^B - 1) / d)."""
    return ((1 << bit_depth) - 1) // divisor


@dataclass
class SplitPlanes:
    """Quotient/remainder planes of an integer depth grid under divisor d."""

    msb: np.ndarray
    lsb: np.ndarray
    divisor: int
    bit_depth: int

    def __post_init__(self):
        self.msb = np.asarray(self.msb, dtype=np.int64)
        self.lsb = np.asarray(self.lsb, dtype=np.int64)
        if self.msb.shape != self.lsb.shape:
            raise SplitError("msb and lsb dimensions differ")
        if self.divisor < 2:
            raise SplitError("divisor must be >= 2")
        self.validate()

    def validate(self):
        if self.lsb.min(initial=0) < 0 or self.lsb.max(initial=0) >= self.divisor:
            raise SplitError("lsb values outside [0, d)")
        top = msb_levels(self.bit_depth, self.divisor)
        if self.msb.min(initial=0) < 0 or self.msb.max(initial=0) > top:
            raise SplitError(f"msb values outside [0, {top}]")

    @property
    def shape(self):
        return self.msb.shape

    def max_levels(self) -> tuple[int, int]:
        """(msb max level, lsb max level); lower-bounded at 1 for scaling."""
        return max(msb_levels(self.bit_depth, self.divisor), 1), max(self.divisor - 1, 1)


def split(depth: DepthMap, divisor: int) -> SplitPlanes:
    if divisor < 2:
        raise SplitError("divisor must be >= 2")
    x = depth.data.astype(np.int64)
    return SplitPlanes(x // divisor, x % divisor, divisor, depth.bit_depth)


def merge(planes: SplitPlanes, precision_um: int = 1000) -> DepthMap:
    planes.validate()
    x = planes.msb * planes.divisor + planes.lsb
    if x.max(initial=0) >= (1 << planes.bit_depth):
        raise SplitError("merged value exceeds the declared bit depth")
    return DepthMap.from_values(x, planes.bit_depth, precision_um)


def pack_normalized(planes: SplitPlanes, dtype=np.float32) -> np.ndarray:
    """(2, H, W) array: channel 0 = msb / max-msb-level, channel 1 = lsb / (d-1)."""
    m_lv, l_lv = planes.max_levels()
    out = np.stack(
        [planes.msb.astype(np.float64) / m_lv, planes.lsb.astype(np.float64) / l_lv]
    )
    return out.astype(dtype)


def unpack_denormalized(norm: np.ndarray, planes_like: SplitPlanes) -> np.ndarray:
    """Scale a (2, H, W) normalized plane pair back to integer units (float)."""
    m_lv, l_lv = planes_like.max_levels()
    scale = np.array([m_lv, l_lv], dtype=np.float64).reshape(2, 1, 1)
    return np.asarray(norm, dtype=np.float64) * scale
