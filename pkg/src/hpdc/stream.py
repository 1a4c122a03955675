"""Compressed-file container: fixed header plus three entropy-coded payloads.

Little-endian layout, extension ".hpdc":

    magic "HPDC" | u16 version | u16 width | u16 height | u8 bit_depth |
    u32 divisor | u32 precision_um | 32-byte checkpoint SHA-256 |
    i32 r_min/r_max for channel 0, then channel 1 |
    u16 padded_width | u16 padded_height |
    u32 length + bytes for each substream in order: hyper-latent,
    latent, residual.

The decoder refuses streams whose checkpoint hash differs from the loaded
model: with a different model every coding distribution would silently
disagree, which is undetectable downstream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

MAGIC = b"HPDC"
VERSION = 1

_HEAD = struct.Struct("<4sHHHBII32siiiiHH")


class StreamFormatError(ValueError):
    pass


class ChecksumError(ValueError):
    """Checkpoint hash in the stream does not match the loaded model."""


@dataclass
class CodecStream:
    width: int
    height: int
    bit_depth: int
    divisor: int
    precision_um: int
    checkpoint_hash: bytes
    residual_bounds: tuple  # ((min0, max0), (min1, max1))
    padded_width: int
    padded_height: int
    hyper_bytes: bytes
    latent_bytes: bytes
    residual_bytes: bytes

    def total_bytes(self) -> int:
        return _HEAD.size + 12 + len(self.hyper_bytes) + len(self.latent_bytes) + len(self.residual_bytes)


def write_stream(s: CodecStream) -> bytes:
    if len(s.checkpoint_hash) != 32:
        raise StreamFormatError("checkpoint hash must be 32 bytes")
    (mn0, mx0), (mn1, mx1) = s.residual_bounds
    head = _HEAD.pack(
        MAGIC, VERSION, s.width, s.height, s.bit_depth, s.divisor, s.precision_um,
        s.checkpoint_hash, mn0, mx0, mn1, mx1, s.padded_width, s.padded_height,
    )
    parts = [head]
    for payload in (s.hyper_bytes, s.latent_bytes, s.residual_bytes):
        parts.append(struct.pack("<I", len(payload)))
        parts.append(payload)
    return b"".join(parts)


def read_stream(blob: bytes) -> CodecStream:
    if len(blob) < _HEAD.size + 12:
        raise StreamFormatError("stream shorter than header")
    (magic, version, width, height, bit_depth, divisor, precision,
     ck_hash, mn0, mx0, mn1, mx1, pw, ph) = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise StreamFormatError("bad magic")
    if version != VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    off = _HEAD.size
    payloads = []
    for _ in range(3):
        if off + 4 > len(blob):
            raise StreamFormatError("truncated substream length")
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        if off + n > len(blob):
            raise StreamFormatError("truncated substream payload")
        payloads.append(blob[off : off + n])
        off += n
    if off != len(blob):
        raise StreamFormatError("trailing bytes after last substream")
    return CodecStream(
        width=width, height=height, bit_depth=bit_depth, divisor=divisor,
        precision_um=precision, checkpoint_hash=ck_hash,
        residual_bounds=((mn0, mx0), (mn1, mx1)),
        padded_width=pw, padded_height=ph,
        hyper_bytes=payloads[0], latent_bytes=payloads[1], residual_bytes=payloads[2],
    )
