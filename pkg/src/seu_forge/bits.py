"""IEEE-754 single-precision and two's-complement bit-pattern helpers.

Bit numbering follows the usual hardware convention: bit 0 is the LSB.
For f32 that puts the mantissa at bits [0-22], the exponent at [23-30]
and the sign at bit 31; the "partial exponent" is the low 7 exponent
bits (word bits [23-29]).
"""

from __future__ import annotations

import struct

import numpy as np

F32_WIDTH = 32
F32_SIGN_BIT = 31
F32_EXP_LO = 23
F32_EXP_BITS = 8
F32_MANT_BITS = 23
F32_EXP_MASK = 0xFF
F32_MANT_MASK = (1 << F32_MANT_BITS) - 1

ENCODING_WIDTH = {"f32": 32, "i8": 8, "i32": 32}

# Largest significand a 23-bit mantissa can hold: 2 - 2**-23 ~ 1.99999988.
MAX_SIGNIFICAND = 2.0 - 2.0 ** -F32_MANT_BITS


def f32_to_bits(value: float) -> int:
    """32-bit word of a float, little-endian IEEE-754 single."""
    return struct.unpack("<I", struct.pack("<f", value))[0]


def bits_to_f32(word: int) -> float:
    return struct.unpack("<f", struct.pack("<I", word & 0xFFFFFFFF))[0]


def exponent_field(word: int) -> int:
    return (word >> F32_EXP_LO) & F32_EXP_MASK


def mantissa_field(word: int) -> int:
    return word & F32_MANT_MASK


def sign_field(word: int) -> int:
    return (word >> F32_SIGN_BIT) & 1


def significand_value(word: int) -> float:
    """Significand 1.m in [1, 2) of a normal number (sign ignored)."""
    return 1.0 + mantissa_field(word) / float(1 << F32_MANT_BITS)


def assemble_f32(sign: int, exponent: int, mantissa: int) -> int:
    if not 0 <= exponent <= F32_EXP_MASK:
        raise ValueError(f"exponent field {exponent} out of [0, 255]")
    return (sign & 1) << F32_SIGN_BIT | exponent << F32_EXP_LO | (mantissa & F32_MANT_MASK)


def flip_bit_f32(word: int, bit: int) -> int:
    """Toggle one bit of a 32-bit float pattern. Involution by construction."""
    if not 0 <= bit <= 31:
        raise ValueError(f"f32 bit position {bit} out of [0, 31]")
    return (word ^ (1 << bit)) & 0xFFFFFFFF


def flip_bit_int(value: int, bit: int, width: int) -> int:
    """Toggle one bit of a two's-complement integer of the given width.

    Takes and returns the *decoded* signed value; the flip acts on the
    width-bit representation (so i8 -1 with bit 7 becomes 127).
    """
    if width not in (8, 32):
        raise ValueError(f"unsupported integer width {width}")
    if not 0 <= bit < width:
        raise ValueError(f"bit position {bit} out of [0, {width - 1}]")
    mask = (1 << width) - 1
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if not lo <= value <= hi:
        raise ValueError(f"value {value} does not fit in {width}-bit two's complement")
    u = (value & mask) ^ (1 << bit)
    return u - (1 << width) if u >= 1 << (width - 1) else u


def f32_flip_value(value: float, bit: int) -> float:
    return bits_to_f32(flip_bit_f32(f32_to_bits(value), bit))


def popcount(x: int) -> int:
    return int(x).bit_count()


def partial_exponent_zeros(exponent: int) -> int:
    """Number of '0' bits among the low 7 exponent bits."""
    return 7 - popcount(exponent & 0x7F)


def twos_complement_width(value: int) -> int:
    """Smallest k with value representable in k-bit two's complement."""
    v = int(value)
    if v >= 0:
        return v.bit_length() + 1 if v else 1
    return (-v - 1).bit_length() + 1


# ---------------------------------------------------------------------------
# vectorized views over numpy buffers


def u32_view(arr: np.ndarray) -> np.ndarray:
    """uint32 view of a float32 array (no copy; mutations write through)."""
    if arr.dtype != np.float32:
        raise TypeError(f"expected float32 buffer, got {arr.dtype}")
    return arr.view(np.uint32)


def exponent_fields(arr: np.ndarray) -> np.ndarray:
    return (u32_view(arr) >> np.uint32(F32_EXP_LO)) & np.uint32(F32_EXP_MASK)


def popcount_u32(arr: np.ndarray) -> np.ndarray:
    """Per-element popcount of a uint32 array (SWAR, no Python loop)."""
    x = arr.astype(np.uint32)
    x = x - ((x >> np.uint32(1)) & np.uint32(0x55555555))
    x = (x & np.uint32(0x33333333)) + ((x >> np.uint32(2)) & np.uint32(0x33333333))
    x = (x + (x >> np.uint32(4))) & np.uint32(0x0F0F0F0F)
    return (x * np.uint32(0x01010101)) >> np.uint32(24)
