"""Byte-wise 32-bit range coder over 16-bit quantized cumulative tables.

Frequencies always total 2^16. The coder renormalizes whenever the range
drops below 2^24, so the per-symbol truncation loss stays under
-log2(1 - 2^-8) ~ 0.0057 bits; pending carries are absorbed into a cached
byte before anything is written, so emitted bytes are never revisited.
Total framing overhead is a constant 5 bytes (one lead byte plus a 4-byte
tail), and encoder and decoder consume byte-for-byte identical streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PRECISION_BITS = 16
TOTAL = 1 << PRECISION_BITS
ALPHABET_GUARD = 16
MAX_ALPHABET = TOTAL - ALPHABET_GUARD

_TOP = 1 << 24
_MASK32 = (1 << 32) - 1
_CARRY_EDGE = 0xFF000000


class CoderError(ValueError):
    pass


class DecodeError(CoderError):
    """Truncated or corrupt stream."""


@dataclass(frozen=True)
class QuantizedCdf:
    """Cumulative counts c[0]=0 < c[1] < ... < c[S] = 2^16."""

    cum: np.ndarray

    def __post_init__(self):
        cum = np.asarray(self.cum, dtype=np.int64)
        object.__setattr__(self, "cum", cum)
        if cum.ndim != 1 or cum.size < 2:
            raise CoderError("cumulative table needs at least one symbol")
        if cum[0] != 0 or cum[-1] != TOTAL:
            raise CoderError("cumulative table must span [0, 2^16]")
        if np.any(np.diff(cum) < 1):
            raise CoderError("every symbol needs frequency >= 1")

    @property
    def size(self) -> int:
        return self.cum.size - 1


def build_cdf(pmf) -> QuantizedCdf:
    """Quantize one pmf to counts totalling 2^16 (floor 1 per symbol,
    largest-remainder rounding, ties to the lower symbol index)."""
    counts = quantize_pmf_rows(np.asarray(pmf, dtype=np.float64)[None, :])[0]
    return QuantizedCdf(np.concatenate([[0], np.cumsum(counts)]))


def quantize_pmf_rows(pmf: np.ndarray) -> np.ndarray:
    """Vectorized pmf -> integer counts for a batch of rows.

    Each row gets 1 count per symbol plus a largest-remainder share of the
    remaining 2^16 - S mass. Rows must be non-negative and sum to 1 within
    1e-4 (they are renormalized exactly before quantization).
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    rows, S = pmf.shape
    if S > MAX_ALPHABET:
        raise CoderError(f"alphabet of {S} symbols exceeds {MAX_ALPHABET}")
    if np.any(pmf < -1e-9):
        raise CoderError("pmf has negative entries")
    sums = pmf.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > 1e-4):
        raise CoderError("pmf rows must sum to 1 within 1e-4")
    pmf = np.maximum(pmf, 0.0) / sums[:, None]

    spare = TOTAL - S
    scaled = pmf * spare
    base = np.floor(scaled).astype(np.int64)
    rem = scaled - base
    deficit = spare - base.sum(axis=1)  # >= 0 after renormalization
    # stable argsort on -rem: equal remainders keep lower index first
    order = np.argsort(-rem, axis=1, kind="stable")
    take = np.arange(S)[None, :] < deficit[:, None]
    bump = np.zeros_like(base)
    np.put_along_axis(bump, order, take.astype(np.int64), axis=1)
    counts = base + bump + 1
    return counts


def cdf_rows_from_pmf(pmf: np.ndarray) -> np.ndarray:
    """(rows, S) pmf -> (rows, S+1) cumulative counts."""
    counts = quantize_pmf_rows(pmf)
    rows = counts.shape[0]
    cum = np.zeros((rows, counts.shape[1] + 1), dtype=np.int64)
    np.cumsum(counts, axis=1, out=cum[:, 1:])
    return cum


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._finished = False

    def encode(self, cum_lo: int, cum_hi: int):
        """Code one symbol occupying [cum_lo, cum_hi) of the 2^16 total."""
        r = self._range // TOTAL
        self._low += r * cum_lo
        if cum_hi == TOTAL:
            self._range -= r * cum_lo  # top symbol absorbs the truncation slack
        else:
            self._range = r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._shift_low()
            self._range = (self._range << 8) & _MASK32

    def _shift_low(self):
        if self._low < _CARRY_EDGE or self._low > _MASK32:
            carry = self._low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._cache_size - 1):
                self._out.append((0xFF + carry) & 0xFF)
            self._cache_size = 0
            self._cache = (self._low >> 24) & 0xFF
        self._cache_size += 1
        self._low = (self._low << 8) & _MASK32

    def finish(self) -> bytes:
        if not self._finished:
            for _ in range(5):
                self._shift_low()
            self._finished = True
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        for _ in range(5):
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise DecodeError("stream truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode(self, cum: np.ndarray) -> int:
        """Decode one symbol given its cumulative table (ndarray, c[0]=0)."""
        r = self._range // TOTAL
        value = self._code // r
        if value >= TOTAL:
            value = TOTAL - 1
        sym = int(np.searchsorted(cum, value, side="right")) - 1
        if sym < 0 or sym >= cum.size - 1:
            raise DecodeError("symbol outside table (corrupt stream)")
        cum_lo = int(cum[sym])
        cum_hi = int(cum[sym + 1])
        self._code = (self._code - r * cum_lo) & _MASK32
        if cum_hi == TOTAL:
            self._range -= r * cum_lo
        else:
            self._range = r * (cum_hi - cum_lo)
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range = (self._range << 8) & _MASK32
        return sym


def encode_symbols(symbols, tables) -> bytes:
    """Entropy-code a symbol sequence.

    ``tables`` is either one cumulative row shared by all symbols, or a
    (n, S+1) matrix / sequence with one row per symbol.
    """
    enc = RangeEncoder()
    symbols = np.asarray(symbols, dtype=np.int64)
    if isinstance(tables, QuantizedCdf):
        tables = tables.cum
    tables = np.asarray(tables, dtype=np.int64)
    if tables.ndim == 1:
        cum = tables
        for s in symbols:
            enc.encode(int(cum[s]), int(cum[s + 1]))
    else:
        if tables.shape[0] != symbols.size:
            raise CoderError("one cumulative row per symbol required")
        for i, s in enumerate(symbols):
            row = tables[i]
            enc.encode(int(row[s]), int(row[s + 1]))
    return enc.finish()


def decode_symbols(data: bytes, tables, n: int) -> np.ndarray:
    """Inverse of encode_symbols; needs the identical tables in order."""
    dec = RangeDecoder(data)
    if isinstance(tables, QuantizedCdf):
        tables = tables.cum
    tables = np.asarray(tables, dtype=np.int64)
    out = np.empty(n, dtype=np.int64)
    if tables.ndim == 1:
        for i in range(n):
            out[i] = dec.decode(tables)
    else:
        if tables.shape[0] != n:
            raise CoderError("one cumulative row per symbol required")
        for i in range(n):
            out[i] = dec.decode(tables[i])
    return out


def table_bits(tables, symbols) -> float:
    """Exact code-length model of the quantized tables: sum -log2(freq/2^16)."""
    symbols = np.asarray(symbols, dtype=np.int64)
    tables = np.asarray(tables, dtype=np.int64)
    if tables.ndim == 1:
        freqs = tables[symbols + 1] - tables[symbols]
    else:
        idx = np.arange(symbols.size)
        freqs = tables[idx, symbols + 1] - tables[idx, symbols]
    return float(np.sum(PRECISION_BITS - np.log2(freqs)))
