"""Static-model range coder for the quantized hyperlatent.

32-bit low/range state with byte-wise carry propagation (cache + pending
0xFF run), frequencies in 16-bit fixed point. Every symbol carries the index
of the table it is coded with, so one stream can mix per-channel models.

Stream layout: u16 little-endian symbol count (0xFFFF escapes to a following
u32 count), then the coded bytes. The encoder drops the always-zero leading
byte and flushes four bytes of ``low``; the decoder consumes the stream
exactly, so any truncation surfaces as an error.
"""

from __future__ import annotations

import struct
import zlib
from bisect import bisect_right
from dataclasses import dataclass, field

import numpy as np

PRECISION = 16
TOTAL = 1 << PRECISION
TOP = 1 << 24
MASK32 = 0xFFFFFFFF
_ESCAPE = 0xFFFF


class RangeCoderError(ValueError):
    pass


@dataclass
class FreqTable:
    """Fixed-point frequencies for symbols ``offset .. offset + len(freqs) - 1``."""

    freqs: np.ndarray
    offset: int
    cum: list = field(init=False, repr=False)

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=np.int64)
        if f.ndim != 1 or f.size == 0:
            raise RangeCoderError("frequency table must be a non-empty vector")
        if f.min() < 1 or int(f.sum()) != TOTAL:
            raise RangeCoderError(f"frequencies must be >= 1 and sum to {TOTAL}")
        self.freqs = f
        self.cum = [0] + np.cumsum(f).tolist()

    @property
    def support(self):
        return self.offset, self.offset + len(self.freqs) - 1


def quantize_pmf(pmf, offset: int) -> FreqTable:
    """Map a float pmf to integer frequencies summing to 2**16, each at least 1."""
    p = np.asarray(pmf, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or p.size > TOTAL or (p < 0).any() or not np.isfinite(p).all():
        raise ValueError("pmf must be a finite non-negative vector")
    if p.sum() <= 0:
        raise ValueError("pmf has no mass")
    p = p / p.sum()
    spare = TOTAL - p.size
    f = 1 + np.floor(p * spare).astype(np.int64)
    # hand the rounding remainder to the largest fractional parts
    deficit = TOTAL - int(f.sum())
    if deficit:
        frac = p * spare - np.floor(p * spare)
        order = np.argsort(-frac, kind="stable")
        f[order[:deficit]] += 1
    return FreqTable(f, offset)


def tables_digest(tables) -> int:
    """CRC32 over offsets and frequencies; both ends compare it before decoding."""
    crc = 0
    for t in tables:
        crc = zlib.crc32(struct.pack("<i", t.offset), crc)
        crc = zlib.crc32(t.freqs.astype("<u4").tobytes(), crc)
    return crc


@dataclass
class Bitstream:
    data: bytes
    digest: int | None = None

    @property
    def bit_length(self) -> int:
        return 8 * len(self.data)


class _Encoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.pending = 0
        self.first = True
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            if self.first:
                # the leading byte is always zero, never emitted
                self.first = False
            else:
                self.out.append((self.cache + carry) & 0xFF)
            for _ in range(self.pending):
                self.out.append((0xFF + carry) & 0xFF)
            self.pending = 0
            self.cache = (self.low >> 24) & 0xFF
        else:
            self.pending += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, freq: int):
        r = self.range >> PRECISION
        self.low += start * r
        self.range = r * freq
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out)


class _Decoder:
    def __init__(self, data: bytes, pos: int):
        self.data = data
        self.pos = pos
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        if self.pos >= len(self.data):
            raise RangeCoderError("truncated range-coded stream")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode(self, table: FreqTable) -> int:
        r = self.range >> PRECISION
        count = min(self.code // r, TOTAL - 1)
        idx = bisect_right(table.cum, count) - 1
        start = table.cum[idx]
        freq = table.cum[idx + 1] - start
        self.code -= start * r
        self.range = r * freq
        while self.range < TOP:
            self.code = ((self.code << 8) | self._byte()) & MASK32
            self.range <<= 8
        return idx


def _table_index(table_index, n: int) -> np.ndarray:
    if table_index is None:
        return np.zeros(n, dtype=np.int64)
    idx = np.asarray(table_index, dtype=np.int64).reshape(-1)
    if idx.size != n:
        raise ValueError("table_index must give one table per symbol")
    return idx


def range_encode(symbols, tables, table_index=None) -> Bitstream:
    """Encode integer symbols; ``table_index[i]`` picks the table for symbol i."""
    sym = np.asarray(symbols, dtype=np.int64).reshape(-1)
    tables = list(tables)
    idx = _table_index(table_index, sym.size)
    header = struct.pack("<H", sym.size) if sym.size < _ESCAPE else struct.pack("<HI", _ESCAPE, sym.size)
    enc = _Encoder()
    for s, t in zip(sym.tolist(), idx.tolist()):
        table = tables[t]
        k = s - table.offset
        if k < 0 or k >= len(table.freqs):
            raise RangeCoderError(f"symbol {s} outside table support {table.support}")
        enc.encode(table.cum[k], table.cum[k + 1] - table.cum[k])
    body = enc.finish() if sym.size else b""
    return Bitstream(header + body, tables_digest(tables))


def range_decode(stream: Bitstream | bytes, tables, count: int | None = None, table_index=None) -> np.ndarray:
    """Inverse of :func:`range_encode`. Raises RangeCoderError on any framing problem."""
    tables = list(tables)
    data = stream.data if isinstance(stream, Bitstream) else bytes(stream)
    if isinstance(stream, Bitstream) and stream.digest is not None and stream.digest != tables_digest(tables):
        raise RangeCoderError("decoder tables differ from encoder tables")
    if len(data) < 2:
        raise RangeCoderError("truncated stream header")
    (n,) = struct.unpack_from("<H", data, 0)
    pos = 2
    if n == _ESCAPE:
        if len(data) < 6:
            raise RangeCoderError("truncated stream header")
        (n,) = struct.unpack_from("<I", data, 2)
        pos = 6
    if count is not None and count != n:
        raise RangeCoderError(f"stream holds {n} symbols, expected {count}")
    if n == 0:
        if pos != len(data):
            raise RangeCoderError("trailing bytes after empty stream")
        return np.zeros(0, dtype=np.int64)
    idx = _table_index(table_index, n)
    dec = _Decoder(data, pos)
    out = np.empty(n, dtype=np.int64)
    for i, t in enumerate(idx.tolist()):
        table = tables[t]
        out[i] = dec.decode(table) + table.offset
    if dec.pos != len(data):
        raise RangeCoderError(f"{len(data) - dec.pos} trailing bytes after decoding")
    return out
