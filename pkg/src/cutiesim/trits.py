"""Trit encodings: the 5-trits-per-byte codec plus the on-chip and input codes.

Activations and weights live in memory as ``int8`` numpy arrays holding
-1, 0 or +1. Storage uses a base-3 positional code: five trits ``t[0..4]``
become the byte ``sum((t[i] + 1) * 3**i)``, so every byte is below 243 and the
density is 8 / 5 = 1.6 bits per trit.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import EncodingRange, InvalidCodeword

TRITS_PER_BYTE = 5
N_CODEWORDS = 3**TRITS_PER_BYTE  # 243
BITS_PER_TRIT = 8 / TRITS_PER_BYTE

_POW3 = 3 ** np.arange(TRITS_PER_BYTE, dtype=np.int64)

# Row b holds the five trits encoded by byte b.
_DECODE_LUT = (
    (np.arange(N_CODEWORDS)[:, None] // _POW3[None, :]) % 3 - 1
).astype(np.int8)


class Trit(int):
    """An ``int`` restricted to {-1, 0, +1}."""

    def __new__(cls, value: int):
        v = int(value)
        if v not in (-1, 0, 1):
            raise ValueError(f"not a trit: {value!r}")
        return super().__new__(cls, v)

    def __repr__(self):
        return f"Trit({int(self):+d})" if self else "Trit(0)"


class ProductCode(NamedTuple):
    """2-bit multiplier output: ``10`` for +1, ``01`` for -1, ``00`` for 0."""

    msb: int
    lsb: int

    @property
    def bits(self) -> int:
        return (self.msb << 1) | self.lsb

    def decode(self) -> int:
        return self.msb - self.lsb

    @classmethod
    def encode(cls, value: int) -> "ProductCode":
        if value == 1:
            return cls(1, 0)
        if value == -1:
            return cls(0, 1)
        if value == 0:
            return cls(0, 0)
        raise ValueError(f"product out of range: {value!r}")


def as_trits(values) -> np.ndarray:
    """Return ``values`` as an int8 array, rejecting anything outside {-1,0,1}."""
    arr = np.asarray(values)
    if arr.size and (arr.min() < -1 or arr.max() > 1):
        raise ValueError("array contains non-trit values")
    if arr.dtype.kind == "f" and not np.all(arr == np.round(arr)):
        raise ValueError("array contains non-integer values")
    return arr.astype(np.int8)


def pack5(t: Sequence[int]) -> int:
    if len(t) != TRITS_PER_BYTE:
        raise ValueError("pack5 takes exactly five trits")
    return sum((int(Trit(x)) + 1) * 3**i for i, x in enumerate(t))


def unpack5(b: int) -> tuple[Trit, ...]:
    if not 0 <= b < N_CODEWORDS:
        raise InvalidCodeword(f"byte {b} is not a valid codeword (must be < 243)")
    return tuple(Trit((b // 3**i) % 3 - 1) for i in range(TRITS_PER_BYTE))


def pack_array(trits) -> bytes:
    """Pack a flat trit sequence, zero-filling the final partial quintet."""
    flat = as_trits(trits).reshape(-1)
    pad = (-flat.size) % TRITS_PER_BYTE
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.int8)])
    digits = flat.reshape(-1, TRITS_PER_BYTE).astype(np.int64) + 1
    return (digits @ _POW3).astype(np.uint8).tobytes()


def unpack_array(payload: bytes, count: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size * TRITS_PER_BYTE < count:
        raise ValueError(f"payload of {raw.size} bytes cannot hold {count} trits")
    if raw.size and raw.max() >= N_CODEWORDS:
        bad = int(raw[raw >= N_CODEWORDS][0])
        raise InvalidCodeword(f"byte {bad} is not a valid codeword (must be < 243)")
    return _DECODE_LUT[raw].reshape(-1)[:count].copy()


@dataclass(frozen=True)
class PackedTritTensor:
    """Row-major trit tensor (channels innermost) stored 5 trits per byte."""

    dims: tuple[int, ...]
    payload: bytes

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        expected = -(-self.count // TRITS_PER_BYTE)
        if len(self.payload) != expected:
            raise ValueError(
                f"payload length {len(self.payload)} != ceil({self.count}/5) = {expected}"
            )

    @property
    def count(self) -> int:
        return prod(self.dims)

    @classmethod
    def from_array(cls, arr) -> "PackedTritTensor":
        a = as_trits(arr)
        return cls(a.shape, pack_array(a))

    def to_array(self) -> np.ndarray:
        return unpack_array(self.payload, self.count).reshape(self.dims)

    @property
    def bits_per_trit(self) -> float:
        return 8 * len(self.payload) / self.count if self.count else 0.0

    def __eq__(self, other):
        if not isinstance(other, PackedTritTensor):
            return NotImplemented
        return self.dims == other.dims and self.payload == other.payload

    def __hash__(self):
        return hash((self.dims, self.payload))


# -- compute-side encodings -------------------------------------------------

def twos_complement_code(t: int) -> int:
    """2-bit two's complement storage code of a trit (00=0, 01=+1, 11=-1)."""
    return int(t) & 0b11


def trit_mul(a: int, w: int) -> ProductCode:
    return ProductCode.encode(int(Trit(a)) * int(Trit(w)))


def popcount_accumulate(products: Iterable[ProductCode]) -> int:
    msb = lsb = 0
    for p in products:
        msb += p.msb
        lsb += p.lsb
    return msb - lsb


# -- thermometer encoders ---------------------------------------------------

def binary_thermometer(x: int, m: int) -> np.ndarray:
    """Unary code of ``x`` in ``m`` entries: +1 below ``x``, -1 from ``x`` on."""
    if not 0 <= x <= m:
        raise EncodingRange(f"binary thermometer input {x} outside [0, {m}]")
    return np.where(np.arange(m) < x, 1, -1).astype(np.int8)


def ternary_thermometer(x: int, m: int) -> np.ndarray:
    """Ternary thermometer of ``x`` in [0, 2m]; ``x == m`` encodes as all zeros."""
    if not 0 <= x <= 2 * m:
        raise EncodingRange(f"ternary thermometer input {x} outside [0, {2 * m}]")
    sign = int(np.sign(x - m))
    f = binary_thermometer(abs(x - m), m).astype(np.int16)
    return (sign * (f + 1) // 2).astype(np.int8)


def encode_pixels(values, m: int, kind: str) -> np.ndarray:
    """Thermometer-encode an integer (H, W, C) map into (H, W, C*m) trits.

    Channel ``c`` of the input expands to output channels ``c*m .. c*m+m-1``.
    """
    vals = np.asarray(values)
    if vals.dtype.kind not in "iu":
        raise EncodingRange("thermometer inputs must be integers")
    if kind == "binary":
        lo, hi = 0, m
    elif kind == "ternary":
        lo, hi = 0, 2 * m
    else:
        raise ValueError(f"unknown thermometer kind {kind!r}")
    if vals.size and (vals.min() < lo or vals.max() > hi):
        raise EncodingRange(f"{kind} thermometer inputs must lie in [{lo}, {hi}]")
    idx = np.arange(m)
    v = vals[..., None].astype(np.int64)
    if kind == "binary":
        out = np.where(idx < v, 1, -1)
    else:
        d = v - m
        out = np.where(idx < np.abs(d), np.sign(d), 0)
    return out.astype(np.int8).reshape(*vals.shape[:-1], vals.shape[-1] * m)
