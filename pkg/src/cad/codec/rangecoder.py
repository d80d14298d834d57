"""Byte-oriented range coder with 16-bit frequency tables.

The encoder follows the classic carry-propagating design (a 33-bit ``low``,
32-bit ``range`` and a one-byte cache with a pending-0xFF counter), so no
precision is lost to carry avoidance.  Frequency tables are integer arrays
summing to ``2**PRECISION``; every coded symbol must have frequency >= 1.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

from cad.errors import CorruptStreamError

PRECISION = 16
TOTAL = 1 << PRECISION
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


def quantize_pmf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Integer frequencies summing to ``2**precision`` with every entry >= 1."""
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = pmf.size
    total = 1 << precision
    if n > total:
        raise ValueError(f"{n} symbols do not fit a {precision}-bit table")
    s = pmf.sum()
    pmf = pmf / s if s > 0 else np.full(n, 1.0 / n)
    freq = np.floor(pmf * (total - n)).astype(np.int64) + 1
    freq[np.argmax(freq)] += total - freq.sum()
    return freq


def cumulative(freq: np.ndarray) -> list[int]:
    """Cumulative table with a leading zero, as a plain list for fast lookups."""
    return [0] + np.cumsum(freq).astype(np.int64).tolist()


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & _MASK32

    def encode(self, start: int, freq: int) -> None:
        """Code the interval ``[start, start + freq)`` of a 2**16 table."""
        r = self.range >> PRECISION
        self.low += start * r
        self.range = freq * r
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbol(self, cdf: list[int], symbol: int) -> None:
        start = cdf[symbol]
        self.encode(start, cdf[symbol + 1] - start)

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        # The first emitted byte is the initial empty cache and always zero.
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise CorruptStreamError("range-coded payload ended early")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def decode_target(self) -> int:
        self._r = self.range >> PRECISION
        return min(self.code // self._r, TOTAL - 1)

    def consume(self, start: int, freq: int) -> None:
        self.code -= start * self._r
        self.range = freq * self._r
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK32
            self.range <<= 8

    def decode_symbol(self, cdf: list[int]) -> int:
        target = self.decode_target()
        symbol = bisect_right(cdf, target) - 1
        if symbol >= len(cdf) - 1:
            raise CorruptStreamError("decoded value outside the frequency table")
        self.consume(cdf[symbol], cdf[symbol + 1] - cdf[symbol])
        return symbol
