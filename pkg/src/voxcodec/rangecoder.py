"""Byte-oriented range coder with carry propagation and frequency tables.

Registers: a 48-bit range and a low register with one carry bit, both held
in 64-bit integers; symbol frequencies carry 24 bits of precision.  The
first output byte is always zero (it holds the initial carry slot).
"""

from __future__ import annotations

import bisect
from typing import Iterable, Sequence

import numpy as np

from . import _kernels as K
from .entropy import SYMBOL_MAX, SYMBOL_MIN

PREC_BITS = K.PREC_BITS
TOTAL = K.TOTAL


class RangeCoderError(ValueError):
    """Malformed, truncated or inconsistent range-coded stream."""


class CdfTable:
    """Cumulative frequency table over a contiguous integer alphabet."""

    lo: int
    hi: int   # inclusive

    def cum(self, s: int) -> int:
        raise NotImplementedError

    def freq(self, s: int) -> int:
        return self.cum(s + 1) - self.cum(s)

    def find(self, target: int) -> int:
        lo, hi = self.lo, self.hi + 1
        while hi - lo > 1:
            mid = (lo + hi) >> 1
            if self.cum(mid) <= target:
                lo = mid
            else:
                hi = mid
        return lo

    def contains(self, s: int) -> bool:
        return self.lo <= s <= self.hi

    def as_array(self) -> np.ndarray:
        """Cumulative frequencies for ``lo .. hi + 1``."""
        return np.array([self.cum(s) for s in range(self.lo, self.hi + 2)], dtype=np.int64)


class FrequencyTable(CdfTable):
    def __init__(self, freqs, offset: int = 0):
        freqs = np.asarray(freqs, dtype=np.int64)
        if np.any(freqs < 1):
            raise ValueError("every symbol needs a frequency of at least 1")
        if int(freqs.sum()) != TOTAL:
            raise ValueError(f"frequencies must sum to {TOTAL}, got {int(freqs.sum())}")
        self._cum = np.concatenate([[0], np.cumsum(freqs)]).tolist()
        self.lo = int(offset)
        self.hi = int(offset) + len(freqs) - 1

    @classmethod
    def from_probs(cls, probs, offset: int = 0) -> "FrequencyTable":
        """Largest-remainder rounding of ``probs`` with a floor of one count per symbol."""
        probs = np.asarray(probs, dtype=np.float64)
        probs = probs / probs.sum()
        spread = TOTAL - len(probs)
        exact = probs * spread
        freqs = np.floor(exact).astype(np.int64)
        short = spread - int(freqs.sum())
        order = np.argsort(-(exact - freqs), kind="stable")
        freqs[order[:short]] += 1
        return cls(freqs + 1, offset)

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "FrequencyTable":
        n = hi - lo + 1
        if TOTAL % n:
            raise ValueError("uniform table size must divide the total")
        return cls(np.full(n, TOTAL // n), lo)

    def cum(self, s):
        return self._cum[s - self.lo]

    def find(self, target):
        return self.lo + bisect.bisect_right(self._cum, target) - 1


class LaplaceTable(CdfTable):
    """Laplace CDF quantised to 24 bits over the full 16-bit alphabet.

    ``cum(s) = (s - SYMBOL_MIN) + floor(F(s - 1/2) * (2**24 - 2**16))`` so every
    symbol keeps a count of at least one and the table is a pure function of
    ``(mu, b)``.
    """

    lo, hi = SYMBOL_MIN, SYMBOL_MAX

    def __init__(self, mu: float, b: float):
        self.mu = float(mu)
        self.b = float(b)

    def cum(self, s):
        return int(K.laplace_cum(int(s), self.mu, self.b))

    def find(self, target):
        return int(K.laplace_find(int(target), self.mu, self.b))

    def as_array(self) -> np.ndarray:
        return K.laplace_cum_table(self.mu, self.b)


UNIFORM16 = FrequencyTable.uniform(SYMBOL_MIN, SYMBOL_MAX)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = K.RANGE_INIT
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        low = self.low
        if (low & K.LOW_MASK) < (0xFF << (K.RANGE_BITS - 8)) or (low >> K.RANGE_BITS):
            carry = low >> K.RANGE_BITS
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (low >> (K.RANGE_BITS - 8)) & 0xFF
        self.cache_size += 1
        self.low = (low & K.SHIFT_MASK) << 8

    def encode(self, cum: int, freq: int):
        r = self.range >> PREC_BITS
        self.low += r * cum
        self.range = r * freq
        while self.range < K.RANGE_TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, s: int, table: CdfTable):
        if not table.contains(s):
            raise RangeCoderError(f"symbol {s} outside alphabet [{table.lo}, {table.hi}]")
        lo = table.cum(s)
        self.encode(lo, table.cum(s + 1) - lo)

    def finish(self) -> bytes:
        for _ in range(K.FLUSH_BYTES):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        if len(data) < K.FLUSH_BYTES or data[0] != 0:
            raise RangeCoderError("stream too short or bad leading byte")
        self.code = int.from_bytes(data[1:K.FLUSH_BYTES], "big")
        self.range = K.RANGE_INIT
        self.pos = K.FLUSH_BYTES

    def target(self) -> int:
        t = self.code // (self.range >> PREC_BITS)
        if t >= TOTAL:
            raise RangeCoderError("code value out of range (corrupt stream)")
        return t

    def advance(self, cum: int, freq: int):
        r = self.range >> PREC_BITS
        self.code -= r * cum
        self.range = r * freq
        while self.range < K.RANGE_TOP:
            if self.pos >= len(self.data):
                raise RangeCoderError("unexpected end of stream")
            self.code = (self.code << 8) | self.data[self.pos]
            self.pos += 1
            self.range <<= 8

    def decode_symbol(self, table: CdfTable) -> int:
        s = table.find(self.target())
        lo = table.cum(s)
        self.advance(lo, table.cum(s + 1) - lo)
        return s

    def check_end(self):
        if self.pos != len(self.data):
            raise RangeCoderError(f"{len(self.data) - self.pos} trailing bytes after last symbol")


def _tables(cdfs, n):
    if isinstance(cdfs, CdfTable):
        return [cdfs] * n
    cdfs = list(cdfs)
    if len(cdfs) != n:
        raise ValueError(f"got {len(cdfs)} tables for {n} symbols")
    return cdfs


def range_encode(symbols: Iterable[int], cdfs: CdfTable | Sequence[CdfTable]) -> bytes:
    """Code ``symbols`` with one table each (or one shared table)."""
    symbols = [int(s) for s in symbols]
    enc = RangeEncoder()
    for s, t in zip(symbols, _tables(cdfs, len(symbols))):
        enc.encode_symbol(s, t)
    return enc.finish()


def range_decode(data: bytes, cdfs: CdfTable | Sequence[CdfTable], count: int | None = None) -> list[int]:
    if count is None:
        if isinstance(cdfs, CdfTable):
            raise ValueError("count is required with a shared table")
        count = len(cdfs)
    dec = RangeDecoder(data)
    out = [dec.decode_symbol(t) for t in _tables(cdfs, count)]
    dec.check_end()
    return out
