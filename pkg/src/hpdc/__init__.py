"""Lossless codec for high-precision depth maps.

Pipeline: bit-split pre-processing, a learned lossy transform with a
hyperprior, pseudo-residual-guided mixture modeling of the integer
residual, and a bit-exact range coder.
"""

from .bitsplit import SplitPlanes, merge, pack_normalized, split
from .codec import compress, decompress, roundtrip_check
from .depth_io import (
    DepthMap,
    ProjectionConfig,
    load_depth,
    median_fill,
    project_pointcloud,
    quantize,
    save_depth,
)
from .model import CodecConfig, DepthCodecModel
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "CodecConfig",
    "DepthCodecModel",
    "DepthMap",
    "ProjectionConfig",
    "SplitPlanes",
    "TrainConfig",
    "compress",
    "decompress",
    "evaluate",
    "load_depth",
    "median_fill",
    "merge",
    "pack_normalized",
    "project_pointcloud",
    "quantize",
    "roundtrip_check",
    "save_depth",
    "split",
    "train",
]
