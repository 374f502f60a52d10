"""SEC-DED protection for configuration and instruction registers.

Extended Hamming layout: codeword position 0 holds the global parity bit,
positions that are powers of two hold partial parity bits, every other
position holds a data bit (ascending).  Parity is odd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

# Flip to 0 for an even-parity variant.
PARITY = 1


class DecodeStatus(Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    DOUBLE_ERROR = "double_error"


def hamming_parity_bits(alpha: int) -> int:
    """Smallest p with 2**p >= alpha + p + 1 (the single-error-correcting bound)."""
    if alpha < 1:
        raise ValueError("data width must be >= 1")
    p = 1
    while (1 << p) < alpha + p + 1:
        p += 1
    return p


def check_width(alpha: int) -> int:
    """Check bits (partial parities plus global parity) for ``alpha`` data bits."""
    return hamming_parity_bits(alpha) + 1


def check_width_formula(alpha: int) -> int:
    """Closed-form overhead ``ceil(log2(alpha + 1)) + 1``.

    Agrees with :func:`check_width` whenever a code of that size exists, which
    includes every register width used here (8, 16, 32, 64).
    """
    return math.ceil(math.log2(alpha + 1)) + 1


@lru_cache(maxsize=None)
def _layout(alpha: int) -> tuple[int, tuple[int, ...]]:
    p = hamming_parity_bits(alpha)
    n = alpha + p
    data_pos = tuple(i for i in range(1, n + 1) if i & (i - 1))
    return n, data_pos


def data_positions(alpha: int) -> tuple[int, ...]:
    return _layout(alpha)[1]


def _parity(x: int) -> int:
    return bin(x).count("1") & 1


@lru_cache(maxsize=None)
def cover_masks(alpha: int) -> tuple[int, ...]:
    """Per partial-parity bit, the mask of codeword positions it checks."""
    n, _ = _layout(alpha)
    p = hamming_parity_bits(alpha)
    return tuple(sum(1 << pos for pos in range(1, n + 1) if pos >> i & 1) for i in range(p))


@dataclass(frozen=True)
class Codeword:
    data_width: int
    bits: int

    @property
    def check_width(self) -> int:
        return check_width(self.data_width)

    @property
    def width(self) -> int:
        return self.data_width + self.check_width

    def flip(self, position: int) -> "Codeword":
        if not 0 <= position < self.width:
            raise IndexError(f"codeword position {position} out of range")
        return Codeword(self.data_width, self.bits ^ (1 << position))


@dataclass(frozen=True)
class DecodeResult:
    data: int
    status: DecodeStatus
    position: int | None = None


def secded_encode(data: int, alpha: int) -> Codeword:
    if data < 0 or data >> alpha:
        raise ValueError(f"data 0x{data:x} wider than {alpha} bits")
    n, data_pos = _layout(alpha)
    bits = 0
    for i, pos in enumerate(data_pos):
        if data >> i & 1:
            bits |= 1 << pos
    for i, cover in enumerate(cover_masks(alpha)):
        if _parity(bits & cover) != PARITY:
            bits |= 1 << (1 << i)
    if _parity(bits) != PARITY:
        bits |= 1
    return Codeword(alpha, bits)


def extract_data(bits: int, alpha: int) -> int:
    """Data field of a codeword without any checking (unprotected read)."""
    _, data_pos = _layout(alpha)
    out = 0
    for i, pos in enumerate(data_pos):
        out |= (bits >> pos & 1) << i
    return out


def secded_decode(cw: Codeword) -> DecodeResult:
    alpha = cw.data_width
    n, _ = _layout(alpha)
    bits = cw.bits
    syndrome = 0
    for i, cover in enumerate(cover_masks(alpha)):
        if _parity(bits & cover) != PARITY:
            syndrome |= 1 << i
    global_bad = _parity(bits) != PARITY
    if not global_bad:
        if syndrome == 0:
            return DecodeResult(extract_data(bits, alpha), DecodeStatus.CLEAN)
        return DecodeResult(extract_data(bits, alpha), DecodeStatus.DOUBLE_ERROR)
    if syndrome > n:
        # odd number of flips (>= 3) pointing outside the codeword
        return DecodeResult(extract_data(bits, alpha), DecodeStatus.DOUBLE_ERROR)
    fixed = bits ^ (1 << syndrome)
    return DecodeResult(extract_data(fixed, alpha), DecodeStatus.CORRECTED, syndrome)


@dataclass
class _Register:
    width: int
    codeword: Codeword
    stuck_or: int = 0
    stuck_andn: int = 0


@dataclass
class RegisterFile:
    """ECC-protected register storage with scrub-on-correct reads."""

    registers: dict = field(default_factory=dict)
    corrected_reads: int = 0
    uncorrectable_reads: int = 0

    def declare(self, reg_id: str, width: int, value: int = 0) -> None:
        self.registers[reg_id] = _Register(width, secded_encode(value, width))

    def _get(self, reg_id: str) -> _Register:
        try:
            return self.registers[reg_id]
        except KeyError:
            raise KeyError(f"unknown register {reg_id!r}") from None

    def width(self, reg_id: str) -> int:
        return self._get(reg_id).width

    def codeword_width(self, reg_id: str) -> int:
        return self._get(reg_id).codeword.width

    def write(self, reg_id: str, data: int) -> None:
        reg = self._get(reg_id)
        reg.codeword = secded_encode(data, reg.width)

    def stored(self, reg_id: str) -> Codeword:
        """Physical cell contents, stuck-at bits included."""
        reg = self._get(reg_id)
        bits = (reg.codeword.bits | reg.stuck_or) & ~reg.stuck_andn
        return Codeword(reg.width, bits)

    def flip(self, reg_id: str, position: int) -> None:
        reg = self._get(reg_id)
        reg.codeword = reg.codeword.flip(position)

    def set_stuck(self, reg_id: str, position: int, value: int) -> None:
        reg = self._get(reg_id)
        if not 0 <= position < reg.codeword.width:
            raise IndexError(f"codeword position {position} out of range")
        if value:
            reg.stuck_or |= 1 << position
        else:
            reg.stuck_andn |= 1 << position

    def read(self, reg_id: str) -> DecodeResult:
        reg = self._get(reg_id)
        result = secded_decode(self.stored(reg_id))
        if result.status is DecodeStatus.CORRECTED:
            self.corrected_reads += 1
            reg.codeword = secded_encode(result.data, reg.width)
        elif result.status is DecodeStatus.DOUBLE_ERROR:
            self.uncorrectable_reads += 1
        return result

    def read_raw(self, reg_id: str) -> int:
        """Data bits as stored, bypassing the decoder."""
        return extract_data(self.stored(reg_id).bits, self._get(reg_id).width)
