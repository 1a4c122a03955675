"""Depth map loading, projection, cleaning and quantization.

Integer depth grids with a validity mask. Invalid pixels always hold the
value 0, and the mask is recomputed as (value != 0) whenever a map is read
from disk; a physically-valid zero depth therefore cannot occur, which is
the sentinel convention throughout the codec.

File formats:
  * HPDM raw: 12-byte header (magic "HPDM", u16 width, u16 height, u8 bit
    depth, u8 word size in bytes, u16 reserved = 0), then row-major
    little-endian u16/u32 words.
  * PGM "P5" with a 16-bit maxval, big-endian sample order.
  * Point clouds: little-endian float32 (x, y, z, intensity) records;
    bare (x, y, z) triples are accepted too. Intensity is ignored.
"""

from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass, field

import numpy as np

HPDM_MAGIC = b"HPDM"
DEFAULT_PRECISION_UM = 1000  # 1 mm


class DepthFormatError(ValueError):
    """Malformed container or header."""


class DepthRangeError(ValueError):
    """Value does not fit the declared bit depth."""


@dataclass
class DepthMap:
    """Integer depth grid, bit depth ``bit_depth`` in [8, 24], plus mask.

    ``precision_um`` is the physical size of one integer unit in
    micrometers (1000 = 1 mm). ``data`` is int32, ``mask`` bool; both
    row-major (height, width).
    """

    data: np.ndarray
    mask: np.ndarray
    bit_depth: int
    precision_um: int = DEFAULT_PRECISION_UM

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.shape != self.mask.shape or self.data.ndim != 2:
            raise DepthFormatError("data and mask must be 2-d and congruent")
        if not 8 <= self.bit_depth <= 24:
            raise DepthFormatError(f"bit depth {self.bit_depth} outside [8, 24]")
        limit = 1 << self.bit_depth
        if self.data.min(initial=0) < 0 or self.data.max(initial=0) >= limit:
            raise DepthRangeError(f"values outside [0, 2^{self.bit_depth})")
        if np.any(self.data[~self.mask] != 0):
            raise DepthFormatError("invalid pixels must hold value 0")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (
            self.bit_depth == other.bit_depth
            and self.precision_um == other.precision_um
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
            and bool(np.array_equal(self.mask, other.mask))
        )

    @classmethod
    def from_values(cls, values, bit_depth: int,
                    precision_um: int = DEFAULT_PRECISION_UM) -> "DepthMap":
        """Build a map from raw integers; mask = (value != 0)."""
        arr = np.asarray(values, dtype=np.int32)
        return cls(arr, arr != 0, bit_depth, precision_um)


@dataclass
class ProjectionConfig:
    """Range-image geometry for spinning-LiDAR point clouds.

    Defaults target a 64-beam sensor: 64 x 2048 grid over elevations
    [-24.8 deg, +2 deg].
    """

    rows: int = 64
    cols: int = 2048
    elev_max: float = math.radians(2.0)
    elev_min: float = math.radians(-24.8)
    max_range_m: float = 120.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        if not self.elev_max > self.elev_min:
            raise ValueError("elev_max must exceed elev_min")
        if not self.max_range_m > 0:
            raise ValueError("max_range must be positive")


def quantize(depth_m, precision_um: int):
    """Meters to integer units of ``precision_um``; halves round away from zero."""
    v = np.asarray(depth_m, dtype=np.float64) * (1e6 / precision_um)
    return np.floor(v + 0.5).astype(np.int64)


def round_half_away(values) -> np.ndarray:
    """Symmetric round-half-away-from-zero, elementwise."""
    v = np.asarray(values, dtype=np.float64)
    return (np.sign(v) * np.floor(np.abs(v) + 0.5)).astype(np.int64)


def load_depth(path, fmt: str, precision_um: int = DEFAULT_PRECISION_UM) -> DepthMap:
    """Read a depth map; ``fmt`` is one of raw16, raw32, pgm16."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if fmt in ("raw16", "raw32"):
        return _parse_hpdm(blob, fmt, precision_um)
    if fmt == "pgm16":
        return _parse_pgm16(blob, precision_um)
    raise DepthFormatError(f"unknown format {fmt!r}")


def save_depth(path, depth: DepthMap, fmt: str):
    with open(path, "wb") as fh:
        if fmt in ("raw16", "raw32"):
            fh.write(_encode_hpdm(depth, fmt))
        elif fmt == "pgm16":
            fh.write(_encode_pgm16(depth))
        else:
            raise DepthFormatError(f"unknown format {fmt!r}")


def _encode_hpdm(depth: DepthMap, fmt: str) -> bytes:
    word = 2 if fmt == "raw16" else 4
    if word == 2 and depth.bit_depth > 16:
        raise DepthRangeError("bit depth > 16 needs raw32")
    header = struct.pack(
        "<4sHHBBH", HPDM_MAGIC, depth.width, depth.height, depth.bit_depth, word, 0
    )
    dtype = np.dtype("<u2") if word == 2 else np.dtype("<u4")
    return header + depth.data.astype(dtype).tobytes()


def _parse_hpdm(blob: bytes, fmt: str, precision_um: int) -> DepthMap:
    if len(blob) < 12:
        raise DepthFormatError("truncated HPDM header")
    magic, width, height, bit_depth, word, _ = struct.unpack_from("<4sHHBBH", blob, 0)
    if magic != HPDM_MAGIC:
        raise DepthFormatError("bad HPDM magic")
    expected_word = 2 if fmt == "raw16" else 4
    if word != expected_word:
        raise DepthFormatError(f"word size {word} does not match format {fmt}")
    dtype = np.dtype("<u2") if word == 2 else np.dtype("<u4")
    need = width * height * word
    payload = blob[12:]
    if len(payload) != need:
        raise DepthFormatError(f"payload is {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload, dtype=dtype).astype(np.int64).reshape(height, width)
    if values.max(initial=0) >= (1 << bit_depth):
        raise DepthRangeError(f"sample exceeds 2^{bit_depth} - 1")
    return DepthMap.from_values(values, bit_depth, precision_um)


def _encode_pgm16(depth: DepthMap) -> bytes:
    if depth.bit_depth > 16:
        raise DepthRangeError("PGM carries at most 16 bits per sample")
    maxval = (1 << depth.bit_depth) - 1
    header = f"P5\n{depth.width} {depth.height}\n{maxval}\n".encode("ascii")
    return header + depth.data.astype(">u2").tobytes()


def _parse_pgm16(blob: bytes, precision_um: int) -> DepthMap:
    # header: "P5" whitespace width height maxval, with optional '#' comments
    m = re.match(
        rb"P5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s",
        blob,
    )
    if not m:
        raise DepthFormatError("bad PGM header")
    width, height, maxval = (int(m.group(i)) for i in (1, 2, 3))
    if not 256 <= maxval <= 65535:
        raise DepthFormatError(f"pgm16 requires 16-bit maxval, got {maxval}")
    bit_depth = max(8, maxval.bit_length())
    payload = blob[m.end():]
    need = width * height * 2
    if len(payload) != need:
        raise DepthFormatError(f"payload is {len(payload)} bytes, expected {need}")
    values = np.frombuffer(payload, dtype=">u2").astype(np.int64).reshape(height, width)
    if values.max(initial=0) > maxval:
        raise DepthRangeError("sample exceeds declared maxval")
    return DepthMap.from_values(values, bit_depth, precision_um)


def load_pointcloud(path) -> np.ndarray:
    """(N, 3) float32 xyz from packed float32 records (xyz or xyzi)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % 16 == 0:
        pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)[:, :3]
    elif len(blob) % 12 == 0:
        pts = np.frombuffer(blob, dtype="<f4").reshape(-1, 3)
    else:
        raise DepthFormatError("point cloud size is not a multiple of 12 or 16 bytes")
    return np.ascontiguousarray(pts)


def project_pointcloud(points, cfg: ProjectionConfig, bit_depth: int,
                       precision_um: int = DEFAULT_PRECISION_UM) -> DepthMap:
    """Spherical projection of xyz points (meters) onto a range-image grid.

    Azimuth maps to columns via floor((0.5 - atan2(y, x)/2pi) * W) mod W;
    elevation maps to rows via floor((elev_max - elev) / span * H), clamped.
    The nearest point wins cell collisions; empty cells stay invalid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size and not np.all(np.isfinite(pts)):
        raise ValueError("point coordinates must be finite")
    grid = np.zeros((cfg.rows, cfg.cols), dtype=np.int64)
    if pts.size == 0:
        return DepthMap.from_values(grid, bit_depth, precision_um)

    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    horiz = np.hypot(x, y)
    depth_m = np.sqrt(x * x + y * y + z * z)
    keep = (depth_m > 0) & (depth_m <= cfg.max_range_m)
    x, y, z, horiz, depth_m = x[keep], y[keep], z[keep], horiz[keep], depth_m[keep]
    if depth_m.size == 0:
        return DepthMap.from_values(grid, bit_depth, precision_um)

    col = np.floor((0.5 - np.arctan2(y, x) / (2.0 * math.pi)) * cfg.cols).astype(np.int64)
    col %= cfg.cols
    elev = np.arctan2(z, horiz)
    span = cfg.elev_max - cfg.elev_min
    row = np.floor((cfg.elev_max - elev) / span * cfg.rows).astype(np.int64)
    np.clip(row, 0, cfg.rows - 1, out=row)

    units = quantize(depth_m, precision_um)
    if units.max(initial=0) >= (1 << bit_depth):
        raise DepthRangeError(
            f"quantized depth {units.max()} exceeds 2^{bit_depth} - 1"
        )
    # points closer than half a unit would quantize to the invalid sentinel
    nz = units > 0
    row, col, units = row[nz], col[nz], units[nz]
    # nearest point wins: sort descending by depth so closer writes land last
    order = np.argsort(-units, kind="stable")
    grid[row[order], col[order]] = units[order]
    return DepthMap.from_values(grid, bit_depth, precision_um)


def median_fill(depth: DepthMap, window: int = 3) -> DepthMap:
    """Fill invalid pixels with the median of valid neighbors in a
    window x window box around each one, computed on the original map.

    Even neighbor counts take the lower middle value; pixels with no valid
    neighbor stay invalid. Valid pixels pass through untouched.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    h, w = depth.data.shape
    pad = window // 2
    big = np.iinfo(np.int64).max
    vals = np.where(depth.mask, depth.data.astype(np.int64), big)
    vals = np.pad(vals, pad, constant_values=big)
    windows = np.lib.stride_tricks.sliding_window_view(vals, (window, window))
    windows = windows.reshape(h, w, window * window)

    hole = ~depth.mask
    if not hole.any():
        return DepthMap(depth.data.copy(), depth.mask.copy(), depth.bit_depth,
                        depth.precision_um)
    cand = np.sort(windows[hole], axis=1)  # invalid entries sort to the end
    counts = (cand < big).sum(axis=1)
    pick = np.maximum(counts - 1, 0) // 2
    med = np.take_along_axis(cand, pick[:, None], axis=1)[:, 0]
    filled_vals = np.where(counts > 0, med, 0)

    data = depth.data.astype(np.int64).copy()
    mask = depth.mask.copy()
    data[hole] = filled_vals
    mask[hole] = counts > 0
    # a median of valid (nonzero) values is itself nonzero, so mask stays
    # consistent with the zero-sentinel convention
    return DepthMap(data, mask, depth.bit_depth, depth.precision_um)
