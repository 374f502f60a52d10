"""Bit-exact word representation, bit-flip primitives and protection masks.

All fault injection in the simulator operates on raw bit patterns.  The
helpers here move between numeric values and those patterns for the three
supported element types and build the bit masks that decide which bits the
checksum hardware covers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class DType(Enum):
    """Element type of a datapath word.

    The value tuple is ``(name, width, accumulator_width)``.
    """

    INT8 = ("int8", 8, 32)
    FP32 = ("fp32", 32, 32)
    BF16 = ("bf16", 16, 32)

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def width(self) -> int:
        return self.value[1]

    @property
    def accumulator_width(self) -> int:
        return self.value[2]

    @property
    def is_float(self) -> bool:
        return self is not DType.INT8

    @property
    def storage(self) -> np.dtype:
        """Unsigned numpy dtype that holds one raw pattern."""
        return np.dtype({8: np.uint8, 16: np.uint16, 32: np.uint32}[self.width])

    @property
    def accumulator(self) -> "DType":
        """Element type of the accumulator words this type produces."""
        return DType.FP32 if self.is_float else _INT32

    @classmethod
    def parse(cls, name: str) -> "DType":
        for member in cls:
            if member.label == name.lower():
                return member
        raise ValueError(f"unknown dtype {name!r}")


class _Int32:
    """Accumulator type for INT8 MACs; not a user-selectable datapath type."""

    label = "int32"
    width = 32
    accumulator_width = 32
    is_float = False
    storage = np.dtype(np.uint32)

    @property
    def accumulator(self):
        return self

    def __repr__(self) -> str:
        return "INT32"


_INT32 = _Int32()
INT32 = _INT32

INT8_MIN, INT8_MAX = -128, 127


@dataclass(frozen=True)
class Word:
    """A raw bit pattern of exactly ``dtype.width`` bits."""

    bits: int
    dtype: DType

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.dtype.width:
            raise ValueError(f"pattern 0x{self.bits:x} wider than {self.dtype.width} bits")

    @property
    def value(self):
        return decode_word(self)


@dataclass(frozen=True)
class BitMask:
    """Set of protected bit positions; bit ``width - 1`` is the sign."""

    mask: int
    dtype: DType

    def __post_init__(self):
        if self.mask < 0 or self.mask >> self.dtype.width:
            raise ValueError(f"mask 0x{self.mask:x} exceeds {self.dtype.width}-bit word")

    @property
    def positions(self) -> list[int]:
        return [p for p in range(self.dtype.width) if self.mask >> p & 1]

    def __contains__(self, position: int) -> bool:
        return bool(self.mask >> position & 1)

    def __len__(self) -> int:
        return bin(self.mask).count("1")

    def issubset(self, other: "BitMask") -> bool:
        return self.mask & ~other.mask == 0


class MaskPolicy(Enum):
    FULL = "full"
    TOP_SENSITIVE = "top_sensitive"
    CUSTOM = "custom"


# Number of most-significant bits that dominate output quality.
TOP_SENSITIVE_BITS = {DType.INT8: 8, DType.FP32: 9, DType.BF16: 4}


def protection_mask(dtype: DType, policy: MaskPolicy | str = MaskPolicy.TOP_SENSITIVE,
                    custom: int | None = None) -> BitMask:
    """Return the bit mask the checksum hardware covers for ``dtype``.

    ``TOP_SENSITIVE`` keeps the top bits listed in :data:`TOP_SENSITIVE_BITS`;
    integers keep every bit since they have no low-impact mantissa.
    """
    policy = MaskPolicy(policy)
    full = (1 << dtype.width) - 1
    if policy is MaskPolicy.FULL:
        return BitMask(full, dtype)
    if policy is MaskPolicy.CUSTOM:
        if custom is None:
            raise ValueError("custom policy needs an explicit mask")
        return BitMask(int(custom), dtype)
    top = TOP_SENSITIVE_BITS[dtype]
    return BitMask(full ^ ((1 << (dtype.width - top)) - 1), dtype)


# --------------------------------------------------------------------------- arrays

def _round_fp32_to_bf16(bits32: np.ndarray) -> np.ndarray:
    bits32 = bits32.astype(np.uint32)
    nan = (bits32 & 0x7FFFFFFF) > 0x7F800000
    rounding = np.uint32(0x7FFF) + ((bits32 >> 16) & 1)
    out = ((bits32.astype(np.uint64) + rounding) >> 16).astype(np.uint16)
    return np.where(nan, ((bits32 >> 16) | 0x40).astype(np.uint16), out)


def to_bits(values, dtype: DType) -> np.ndarray:
    """Encode an array of values as raw patterns (``dtype.storage``).

    Integers must already be in range; floats round to nearest even.
    """
    if dtype is DType.INT8:
        arr = np.asarray(values)
        if arr.size and (arr.min() < INT8_MIN or arr.max() > INT8_MAX):
            raise OverflowError("value outside int8 range")
        return arr.astype(np.int8).view(np.uint8)
    if dtype is INT32:
        return np.asarray(values).astype(np.int64).astype(np.int32).view(np.uint32)
    with np.errstate(over="ignore"):
        f32 = np.asarray(values, dtype=np.float64).astype(np.float32)
    bits = np.ascontiguousarray(f32).view(np.uint32)
    if dtype is DType.FP32:
        return bits
    return _round_fp32_to_bf16(bits)


def from_bits(bits, dtype: DType) -> np.ndarray:
    """Decode raw patterns; floats come back as float32, ints as int64."""
    bits = np.ascontiguousarray(bits, dtype=dtype.storage)
    if dtype is DType.INT8:
        return bits.view(np.int8).astype(np.int64)
    if dtype is INT32:
        return bits.view(np.int32).astype(np.int64)
    if dtype is DType.FP32:
        return bits.view(np.float32)
    return (bits.astype(np.uint32) << 16).view(np.float32)


def round_to(values, dtype: DType) -> np.ndarray:
    """Round float values to ``dtype`` precision, returned widened to float32."""
    if dtype is DType.BF16:
        return from_bits(to_bits(values, dtype), dtype)
    return np.asarray(values, dtype=np.float32)


def wrap_int32(values) -> np.ndarray:
    """Two's-complement wrap of integer values to 32 bits (as int64)."""
    v = np.asarray(values, dtype=np.int64)
    return ((v + (1 << 31)) & 0xFFFFFFFF) - (1 << 31)


# --------------------------------------------------------------------------- scalars

def encode_word(value, dtype: DType) -> Word:
    """Bit-exact layout of ``value`` in ``dtype``.

    >>> hex(encode_word(-1, DType.INT8).bits)
    '0xff'
    """
    if dtype is DType.INT8:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{value} is not an integer")
        iv = int(value)
        if not INT8_MIN <= iv <= INT8_MAX:
            raise OverflowError(f"{iv} outside int8 range")
        return Word(iv & 0xFF, dtype)
    fv = float(value)
    if not math.isfinite(fv):
        raise ValueError("only finite values can be encoded")
    bits = int(to_bits(np.array([fv]), dtype)[0])
    if (bits >> (dtype.width - 9 if dtype is DType.FP32 else 7)) & 0xFF == 0xFF:
        raise OverflowError(f"{fv} overflows {dtype.label}")
    return Word(bits, dtype)


def decode_word(word: Word):
    out = from_bits(np.array([word.bits]), word.dtype)[0]
    return int(out) if word.dtype is DType.INT8 else float(out)


def flip_bit(word: Word, position: int) -> Word:
    if not 0 <= position < word.dtype.width:
        raise IndexError(f"bit {position} outside {word.dtype.width}-bit word")
    return Word(word.bits ^ (1 << position), word.dtype)
