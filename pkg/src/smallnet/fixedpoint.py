"""Q16.16 saturating fixed-point arithmetic.

A value is a 32-bit two's-complement word read as 16 integer bits (sign
included) and 16 fractional bits. Every operation saturates at the range
bounds; nothing wraps.

Two surfaces are provided:

* scalar helpers on plain Python ints (``add_raw``, ``mul_raw``, ...) and the
  ``Fx32`` value type built on them, used by the cycle simulator;
* vectorised helpers on int64 numpy arrays (``vadd``, ``vmul``, ...), used by
  the functional quantized engine.

Both must agree bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FRAC_BITS = 16
INT_BITS = 16
ONE = 1 << FRAC_BITS
RAW_MAX = (1 << 31) - 1
RAW_MIN = -(1 << 31)
RESOLUTION = 1.0 / ONE

# sigmoid LUT geometry: 1024 samples over [-8, 8), step 1/64
LUT_SIZE = 1024
LUT_X_MIN = -8
LUT_STEP_SHIFT = FRAC_BITS - 6  # 1/64 in raw units is 2**10
LUT_OFFSET = -LUT_X_MIN << FRAC_BITS
LUT_X_MAX_RAW = 8 << FRAC_BITS


def saturate(raw: int) -> int:
    if raw > RAW_MAX:
        return RAW_MAX
    if raw < RAW_MIN:
        return RAW_MIN
    return raw


def from_real_raw(x: float) -> int:
    """Round ``x`` to the nearest Q16.16 word, ties away from zero."""
    if not math.isfinite(x):
        raise ValueError(f"cannot convert non-finite value {x!r} to Q16.16")
    scaled = abs(x) * ONE
    if scaled >= RAW_MAX + 1:
        return RAW_MAX if x > 0 else RAW_MIN
    mag = math.floor(scaled + 0.5)
    return saturate(mag if x >= 0 else -mag)


def to_real_raw(raw: int) -> float:
    return raw / ONE


def add_raw(a: int, b: int) -> int:
    return saturate(a + b)


def mul_raw(a: int, b: int) -> int:
    # python >> on ints is an arithmetic shift (floor), like the hardware shifter
    return saturate((a * b) >> FRAC_BITS)


def to_bits(raw: int) -> int:
    """Unsigned 32-bit pattern of a signed raw word."""
    return raw & 0xFFFFFFFF


def from_bits(bits: int) -> int:
    """Signed raw word from an unsigned 32-bit pattern."""
    if not 0 <= bits <= 0xFFFFFFFF:
        raise ValueError(f"bit pattern {bits:#x} does not fit in 32 bits")
    return bits - (1 << 32) if bits & 0x80000000 else bits


@dataclass(frozen=True, order=True)
class Fx32:
    """A single Q16.16 value. ``raw`` is the signed 32-bit integer."""

    raw: int

    def __post_init__(self):
        if not RAW_MIN <= self.raw <= RAW_MAX:
            raise ValueError(f"raw value {self.raw} outside 32-bit range")

    @classmethod
    def from_real(cls, x: float) -> "Fx32":
        return cls(from_real_raw(x))

    @classmethod
    def from_bits(cls, bits: int) -> "Fx32":
        return cls(from_bits(bits))

    @property
    def bits(self) -> int:
        return to_bits(self.raw)

    def to_real(self) -> float:
        return to_real_raw(self.raw)

    def __add__(self, other: "Fx32") -> "Fx32":
        return Fx32(add_raw(self.raw, other.raw))

    def __mul__(self, other: "Fx32") -> "Fx32":
        return Fx32(mul_raw(self.raw, other.raw))

    def __repr__(self) -> str:
        return f"Fx32({self.to_real():.6f}, raw={self.bits:#010x})"


MAX = Fx32(RAW_MAX)
MIN = Fx32(RAW_MIN)
ZERO = Fx32(0)


def from_real(x: float) -> Fx32:
    return Fx32.from_real(x)


def to_real(x: Fx32) -> float:
    return x.to_real()


def fx_add(a: Fx32, b: Fx32) -> Fx32:
    return a + b


def fx_mul(a: Fx32, b: Fx32) -> Fx32:
    return a * b


@dataclass(frozen=True)
class SigmoidLut:
    """Sampled logistic function used by the activation units.

    ``entries[k]`` holds sigma(-8 + k/64) as a raw Q16.16 word. Inputs below
    -8 read ``clamp_low``; inputs at or above +8 read ``clamp_high``.
    """

    entries: tuple[int, ...]
    clamp_low: int
    clamp_high: int

    @classmethod
    def build(cls) -> "SigmoidLut":
        xs = [LUT_X_MIN + k / 64 for k in range(LUT_SIZE)]
        entries = tuple(from_real_raw(_logistic(x)) for x in xs)
        return cls(entries, from_real_raw(_logistic(-8.0)),
                   from_real_raw(_logistic(8.0)))

    def __post_init__(self):
        if len(self.entries) != LUT_SIZE:
            raise ValueError(f"LUT needs {LUT_SIZE} entries, got {len(self.entries)}")
        if any(b < a for a, b in zip(self.entries, self.entries[1:])):
            raise ValueError("LUT entries must be non-decreasing")
        if self.entries[LUT_SIZE // 2] != ONE // 2:
            raise ValueError("LUT entry at x=0 must be exactly 0.5")

    def lookup(self, raw: int) -> int:
        if raw < -LUT_OFFSET:
            return self.clamp_low
        if raw >= LUT_X_MAX_RAW:
            return self.clamp_high
        return self.entries[(raw + LUT_OFFSET) >> LUT_STEP_SHIFT]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.entries, dtype=np.int64)


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


DEFAULT_LUT = SigmoidLut.build()


def fx_sigmoid(x: Fx32, lut: SigmoidLut = DEFAULT_LUT) -> Fx32:
    return Fx32(lut.lookup(x.raw))


# -- vectorised (int64 arrays of raw words) ---------------------------------

def vsaturate(raw: np.ndarray) -> np.ndarray:
    return np.clip(raw, RAW_MIN, RAW_MAX)


def vfrom_real(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot convert non-finite values to Q16.16")
    scaled = np.minimum(np.abs(x) * ONE, float(RAW_MAX + 1))
    mag = np.floor(scaled + 0.5).astype(np.int64)
    return vsaturate(np.where(x >= 0, mag, -mag))


def vto_real(raw) -> np.ndarray:
    return np.asarray(raw, dtype=np.int64) / ONE


def vadd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return vsaturate(np.asarray(a, dtype=np.int64) + np.asarray(b, dtype=np.int64))


def vmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # operands are 32-bit so the product fits in int64
    prod = np.asarray(a, dtype=np.int64) * np.asarray(b, dtype=np.int64)
    return vsaturate(prod >> FRAC_BITS)


def vsigmoid(raw: np.ndarray, lut: SigmoidLut = DEFAULT_LUT) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.int64)
    idx = np.clip((raw + LUT_OFFSET) >> LUT_STEP_SHIFT, 0, LUT_SIZE - 1)
    out = lut.as_array()[idx]
    out = np.where(raw < -LUT_OFFSET, lut.clamp_low, out)
    return np.where(raw >= LUT_X_MAX_RAW, lut.clamp_high, out)
