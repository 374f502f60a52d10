import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from shieldsim.numerics import (INT32, DType, MaskPolicy, Word, decode_word, encode_word,
                                flip_bit, from_bits, protection_mask, round_to, to_bits,
                                wrap_int32)


def test_widths():
    assert [(d.width, d.accumulator_width) for d in DType] == [(8, 32), (32, 32), (16, 32)]
    assert all(d.accumulator_width >= d.width for d in DType)
    assert DType.INT8.accumulator is INT32
    assert DType.BF16.accumulator is DType.FP32
    assert DType.parse("BF16") is DType.BF16
    with pytest.raises(ValueError):
        DType.parse("fp8")


@pytest.mark.parametrize("value,dtype,bits", [
    (-1, DType.INT8, 0xFF),
    (1.0, DType.FP32, 0x3F800000),
    (1.0, DType.BF16, 0x3F80),
])
def test_encode_examples(value, dtype, bits):
    assert encode_word(value, dtype).bits == bits


@pytest.mark.parametrize("bits,dtype,pos,out", [
    (0x00, DType.INT8, 7, 0x80),
    (0x3F800000, DType.FP32, 30, 0x7F800000),
    (0x3F800000, DType.FP32, 31, 0xBF800000),
    (0xFF, DType.INT8, 0, 0xFE),
])
def test_flip_examples(bits, dtype, pos, out):
    assert flip_bit(Word(bits, dtype), pos).bits == out


def test_flip_out_of_range():
    with pytest.raises(IndexError):
        flip_bit(Word(0, DType.INT8), 8)
    with pytest.raises(IndexError):
        flip_bit(Word(0, DType.BF16), -1)


def test_encode_errors():
    with pytest.raises(OverflowError):
        encode_word(128, DType.INT8)
    with pytest.raises(OverflowError):
        encode_word(-129, DType.INT8)
    with pytest.raises(ValueError):
        encode_word(float("nan"), DType.FP32)
    with pytest.raises(OverflowError):
        encode_word(1e39, DType.FP32)
    with pytest.raises(ValueError):
        Word(0x100, DType.INT8)


def test_bf16_rounds_to_nearest_even():
    # 1 + 2**-8 is exactly halfway between 1 and 1 + 2**-7: ties to the even pattern
    assert encode_word(1.0 + 2.0 ** -8, DType.BF16).bits == 0x3F80
    assert encode_word(1.0 + 3 * 2.0 ** -8, DType.BF16).bits == 0x3F82


def test_masks():
    assert protection_mask(DType.FP32).positions == list(range(23, 32))
    assert protection_mask(DType.BF16).positions == list(range(12, 16))
    assert protection_mask(DType.INT8).positions == list(range(8))
    for d in DType:
        full = protection_mask(d, MaskPolicy.FULL)
        assert len(full) == d.width
        assert protection_mask(d, "top_sensitive").issubset(full)
    assert protection_mask(DType.INT8, "custom", 0x81).positions == [0, 7]
    with pytest.raises(ValueError):
        protection_mask(DType.INT8, "custom", 0x100)
    with pytest.raises(ValueError):
        protection_mask(DType.INT8, "custom")


def test_array_round_trip_random():
    rng = np.random.default_rng(1)
    ints = rng.integers(-128, 128, 10_000)
    assert np.array_equal(from_bits(to_bits(ints, DType.INT8), DType.INT8), ints)
    f32 = rng.normal(size=10_000).astype(np.float32) * np.float32(1e3)
    assert np.array_equal(from_bits(to_bits(f32, DType.FP32), DType.FP32), f32)
    b16 = round_to(rng.normal(size=10_000) * 100, DType.BF16)
    assert np.array_equal(from_bits(to_bits(b16, DType.BF16), DType.BF16), b16)


def test_int32_patterns_and_wrap():
    v = np.array([-1, 2 ** 31 - 1, -2 ** 31])
    assert to_bits(v, INT32).tolist() == [0xFFFFFFFF, 0x7FFFFFFF, 0x80000000]
    assert np.array_equal(from_bits(to_bits(v, INT32), INT32), v)
    assert wrap_int32([2 ** 31, -2 ** 31 - 1]).tolist() == [-2 ** 31, 2 ** 31 - 1]


def test_flipped_nan_patterns_preserved():
    w = flip_bit(encode_word(1.5, DType.FP32), 30)
    assert w.bits == 0x7FC00000
    assert np.isnan(w.value)
    assert int(to_bits(from_bits(np.array([w.bits]), DType.FP32), DType.FP32)[0]) == w.bits


@given(st.integers(-128, 127))
def test_int8_round_trip(v):
    assert decode_word(encode_word(v, DType.INT8)) == v


@given(st.floats(allow_nan=False, allow_infinity=False, width=32))
def test_fp32_round_trip(v):
    w = encode_word(v, DType.FP32)
    assert w.bits == struct.unpack("<I", struct.pack("<f", v))[0]
    assert decode_word(w) == v


@given(st.integers(0, 0xFFFF))
def test_bf16_representable_round_trip(bits):
    value = float(from_bits(np.array([bits]), DType.BF16)[0])
    if np.isfinite(value) and (bits >> 7) & 0xFF != 0xFF:
        assert decode_word(encode_word(value, DType.BF16)) == value


@given(st.sampled_from(list(DType)), st.data())
def test_flip_is_involution(dtype, data):
    bits = data.draw(st.integers(0, (1 << dtype.width) - 1))
    pos = data.draw(st.integers(0, dtype.width - 1))
    w = Word(bits, dtype)
    once = flip_bit(w, pos)
    assert once.bits ^ w.bits == 1 << pos
    assert flip_bit(once, pos) == w
