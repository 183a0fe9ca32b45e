"""Range coding of integer symbols under quantized cumulative tables.

Payload layout produced by :func:`encode_symbols`::

    range-coder body (trailing zero bytes stripped) | u16 check (LE)

The check is CRC-CCITT over every coded symbol together with the tag of the
distribution it was coded under, so a decoder whose distributions drift from
the encoder's (even by one ulp of sigma) fails loudly at the end of the payload.
"""
from __future__ import annotations

import binascii
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr

PRECISION = 16
TOTAL = 1 << PRECISION
SYMBOL_CLAMP = 255
SUPPORT_SIGMAS = 40.0

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class StreamError(ValueError):
    """Corrupt or inconsistent payload. ``offset`` is the byte position reached."""

    def __init__(self, msg: str, offset: int = -1):
        super().__init__(f"{msg} (byte offset {offset})" if offset >= 0 else msg)
        self.msg = msg
        self.offset = offset


@dataclass(frozen=True, eq=False)
class CodingDistribution:
    """Integer symbols ``lo .. lo + n - 1`` with frequencies summing to :data:`TOTAL`.

    With ``escape`` the last frequency slot is an escape symbol: any value
    outside the support is coded as escape followed by 32 raw bits.
    """

    lo: int
    freqs: np.ndarray
    escape: bool = False
    tag: bytes = b""
    cum: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        f = np.asarray(self.freqs, dtype=np.int64)
        if f.ndim != 1 or f.size == 0 or (f < 1).any() or int(f.sum()) != TOTAL:
            raise ValueError("frequencies must be >= 1 and sum to TOTAL")
        object.__setattr__(self, "freqs", f)
        object.__setattr__(self, "cum", np.concatenate([[0], np.cumsum(f)]))

    @property
    def n_symbols(self) -> int:
        return self.freqs.size - (1 if self.escape else 0)

    @property
    def hi(self) -> int:
        return self.lo + self.n_symbols - 1

    def bits(self, symbol: int) -> float:
        """Ideal code length of ``symbol`` under the quantized table."""
        idx = symbol - self.lo
        if 0 <= idx < self.n_symbols:
            return PRECISION - math.log2(self.freqs[idx])
        if not self.escape:
            raise ValueError(f"symbol {symbol} outside support [{self.lo}, {self.hi}]")
        return PRECISION - math.log2(self.freqs[-1]) + 32


def quantize_distribution(p, lo: int = 0, escape: bool = False, tag: bytes = b"") -> CodingDistribution:
    """Turn real probabilities into a frequency table summing exactly to TOTAL.

    ``p`` covers the symbols ``lo, lo+1, ...``; with ``escape`` the escape slot
    receives the leftover mass ``1 - sum(p)``. Frequencies start at
    ``max(1, round(p * TOTAL))``; the surplus or deficit is then settled one
    unit at a time on the entries whose rounding error is largest, ties going
    to the lower index. Symbols with ``p < 1/TOTAL`` are never raised above 1.
    """
    p = np.asarray(p, dtype=np.float64)
    if escape:
        p = np.append(p, max(0.0, 1.0 - float(p.sum())))
    s = p.sum()
    if not s > 0:
        raise ValueError("probabilities must have positive mass")
    target = p / s * TOTAL
    f = np.maximum(1, np.floor(target + 0.5)).astype(np.int64)
    idx = np.arange(f.size)
    d = TOTAL - int(f.sum())
    while d:
        err = target - f
        if d > 0:
            cand = idx[target >= 1.0]
            if cand.size == 0:
                cand = idx[[int(np.argmax(p))]]
            order = cand[np.lexsort((cand, -err[cand]))]
            step = order[:d]
            f[step] += 1
        else:
            cand = idx[f > 1]
            order = cand[np.lexsort((cand, err[cand]))]
            step = order[:-d]
            f[step] -= 1
        d = TOTAL - int(f.sum())
    return CodingDistribution(lo, f, escape, tag)


def _trim(p: np.ndarray) -> tuple[int, int]:
    """Smallest index range holding every symbol that would not be floored."""
    keep = np.flatnonzero(p * TOTAL >= 0.5)
    if keep.size == 0:
        k = int(np.argmax(p))
        return k, k
    return int(keep[0]), int(keep[-1])


def table_from_pmf(p: np.ndarray, lo: int, tag: bytes = b"") -> CodingDistribution:
    """Escape-capable table from a pmf over ``lo .. lo + len(p) - 1``."""
    a, b = _trim(p)
    return quantize_distribution(p[a: b + 1], lo + a, escape=True, tag=tag)


def gaussian_pmf(sigma: float, half_width: int) -> np.ndarray:
    """Zero-mean discretized Gaussian masses for integers ``-K .. K``."""
    k = np.arange(-half_width, half_width + 1, dtype=np.float64)
    return ndtr((k + 0.5) / sigma) - ndtr((k - 0.5) / sigma)


@lru_cache(maxsize=1 << 16)
def gaussian_table(sigma: float) -> CodingDistribution:
    """Table for the mean-removed residual ``round(y - mu)`` under N(0, sigma^2).

    Candidate support is ``[-40 sigma, 40 sigma]`` clipped to the global symbol
    clamp, then trimmed to symbols whose mass survives quantization; the rest
    goes to the escape slot. A pure function of the float64 ``sigma``.
    """
    sigma = float(sigma)
    half = int(min(SYMBOL_CLAMP, max(1, math.ceil(SUPPORT_SIGMAS * sigma))))
    return table_from_pmf(gaussian_pmf(sigma, half), -half, tag=struct.pack("<d", sigma))


# -- range coder -------------------------------------------------------------------


class RangeEncoder:
    """32-bit range coder with carry propagation (LZMA-style ``shift_low``)."""

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._check = bytearray()

    def _shift_low(self):
        if self.low < 0xFF000000 or self.low > _MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low & 0x00FFFFFF) << 8

    def encode_freq(self, start: int, freq: int):
        r = self.range >> PRECISION
        self.low += r * start
        self.range = r * freq
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_raw16(self, value: int):
        self.encode_freq(value & 0xFFFF, 1)

    def encode(self, symbol: int, dist: CodingDistribution):
        symbol = int(symbol)
        idx = symbol - dist.lo
        if 0 <= idx < dist.n_symbols:
            self.encode_freq(int(dist.cum[idx]), int(dist.freqs[idx]))
        elif dist.escape:
            self.encode_freq(int(dist.cum[-2]), int(dist.freqs[-1]))
            raw = symbol & _MASK32
            self.encode_raw16(raw >> 16)
            self.encode_raw16(raw)
        else:
            raise ValueError(f"symbol {symbol} outside support [{dist.lo}, {dist.hi}] and no escape")
        self._check += struct.pack("<i", symbol) + dist.tag

    def finish(self) -> bytes:
        # any value in [low, low + range) decodes identically; pick the one
        # with three trailing zero bytes so only its top byte must be written
        self.low = (self.low + _TOP - 1) & ~(_TOP - 1)
        self._shift_low()
        self._shift_low()
        body = bytes(self.out[1:]).rstrip(b"\0")  # first byte is always 0
        return body + struct.pack("<H", binascii.crc_hqx(bytes(self._check), 0))


class RangeDecoder:
    def __init__(self, payload: bytes):
        if len(payload) < 2:
            raise StreamError("payload shorter than its 2-byte check", len(payload))
        self.body = payload[:-2]
        self.expected = struct.unpack("<H", payload[-2:])[0]
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next()
        self._check = bytearray()

    def _next(self) -> int:
        b = self.body[self.pos] if self.pos < len(self.body) else 0
        self.pos += 1
        return b

    def _target(self) -> tuple[int, int]:
        r = self.range >> PRECISION
        v = self.code // r
        if v >= TOTAL:
            raise StreamError("range decoder left its valid state", min(self.pos, len(self.body)))
        return v, r

    def _consume(self, r: int, start: int, freq: int):
        self.code -= r * start
        self.range = r * freq
        while self.range < _TOP:
            self.code = ((self.code << 8) | self._next()) & _MASK32
            self.range <<= 8

    def decode_raw16(self) -> int:
        v, r = self._target()
        self._consume(r, v, 1)
        return v

    def decode(self, dist: CodingDistribution) -> int:
        v, r = self._target()
        idx = int(np.searchsorted(dist.cum, v, side="right")) - 1
        self._consume(r, int(dist.cum[idx]), int(dist.freqs[idx]))
        if dist.escape and idx == dist.freqs.size - 1:
            raw = (self.decode_raw16() << 16) | self.decode_raw16()
            symbol = raw - (1 << 32) if raw & 0x80000000 else raw
        else:
            symbol = dist.lo + idx
        self._check += struct.pack("<i", symbol) + dist.tag
        return symbol

    def verify(self):
        got = binascii.crc_hqx(bytes(self._check), 0)
        if got != self.expected:
            raise StreamError("payload check mismatch: decoded symbols or distributions differ from the encoder's",
                              len(self.body))


def encode_symbols(symbols: Sequence[int], dists: Sequence[CodingDistribution]) -> bytes:
    if len(symbols) != len(dists):
        raise ValueError(f"{len(symbols)} symbols but {len(dists)} distributions")
    enc = RangeEncoder()
    for s, d in zip(symbols, dists):
        enc.encode(s, d)
    return enc.finish()


def decode_symbols(payload: bytes, producer: Callable[[int, list], CodingDistribution], count: int) -> list[int]:
    """Decode ``count`` symbols; ``producer(index, decoded_so_far)`` supplies each distribution."""
    dec = RangeDecoder(payload)
    out: list[int] = []
    for i in range(count):
        out.append(dec.decode(producer(i, out)))
    dec.verify()
    return out


def estimate_bits(symbols: Sequence[int], dists: Sequence[CodingDistribution]) -> float:
    return float(sum(d.bits(int(s)) for s, d in zip(symbols, dists)))
