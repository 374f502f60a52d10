"""Scratchpad / accumulator model protected by row and column checksums.

Checksums are wrapping sums of raw (masked) bit patterns, so they never need
a numeric interpretation of the data and float words are handled the same
way as integers.  The guardpad holding them is a separate store so faults can
target checksums independently of data.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .errors import AllocationError
from .numerics import BitMask, DType

PERMANENT_CANDIDATE_COUNT = 2


class VerifyStatus(Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    CHECKSUM_REPAIRED = "checksum_repaired"
    UNCORRECTABLE = "uncorrectable"


@dataclass
class VerifyOutcome:
    status: VerifyStatus
    corrections: list = field(default_factory=list)   # (row, col, delta)
    repaired: list = field(default_factory=list)      # (axis, index)
    row_deltas: dict = field(default_factory=dict)
    col_deltas: dict = field(default_factory=dict)
    latency_cycles: int = 0

    @property
    def detected(self) -> bool:
        return self.status is not VerifyStatus.CLEAN

    def flags(self, row: int, col: int) -> bool:
        """True when the verifier saw a mismatch on this cell's row or column."""
        return row in self.row_deltas or col in self.col_deltas


def verify_latency(rows: int, cols: int) -> int:
    """Cycles from read issue to verdict: one row per cycle, then the row adder tree and a compare."""
    return rows + max(1, math.ceil(math.log2(cols))) + 1


def _mask_value(mask, width: int) -> int:
    if mask is None:
        return (1 << width) - 1
    return mask.mask if isinstance(mask, BitMask) else int(mask)


def checksum_generate(bits, mask=None, width: int | None = None):
    """Row and column wrap-sums of masked raw patterns.

    ``bits`` is an R x C array of raw patterns; ``width`` defaults to the
    itemsize of ``bits`` and is also the checksum width.
    """
    bits = np.asarray(bits)
    if bits.ndim != 2 or 0 in bits.shape:
        raise ValueError("checksums need a non-empty 2-D block")
    width = width or bits.dtype.itemsize * 8
    return kernels.masked_wrap_sums(bits.astype(np.int64), _mask_value(mask, width), width)


def localise(row_deltas: dict, col_deltas: dict, *, allow_single_column: bool = True,
             require_distinct: bool = True):
    """Pair mismatching rows and columns into faulty cells.

    Returns ``(cells, complete)`` where ``cells`` are ``(row, col, delta)``
    and ``complete`` tells whether the cells explain every mismatch, or is
    None for a single-line pattern whose line sum the caller must still
    compare.  Deltas are modular integers, so equality is exact; ambiguous
    pairings are left out.  ``require_distinct`` rejects single-line
    patterns with repeated deltas.
    """
    rows, cols = sorted(row_deltas), sorted(col_deltas)
    if not rows or not cols:
        return [], False
    if len(rows) == 1 and len(cols) == 1:
        r, c = rows[0], cols[0]
        if row_deltas[r] == col_deltas[c]:
            return [(r, c, col_deltas[c])], True
        return [], False
    if len(rows) == 1:
        r = rows[0]
        deltas = [col_deltas[c] for c in cols]
        if not require_distinct or len(set(deltas)) == len(deltas):
            return [(r, c, col_deltas[c]) for c in cols], None
        return [], False
    if len(cols) == 1:
        if not allow_single_column:
            return [], False
        c = cols[0]
        deltas = [row_deltas[r] for r in rows]
        if not require_distinct or len(set(deltas)) == len(deltas):
            return [(r, c, row_deltas[r]) for r in rows], None
        return [], False
    cells = []
    for r in rows:
        hits = [c for c in cols if col_deltas[c] == row_deltas[r]]
        if len(hits) != 1:
            continue
        c = hits[0]
        back = [rr for rr in rows if row_deltas[rr] == col_deltas[c]]
        if back == [r]:
            cells.append((r, c, col_deltas[c]))
    complete = len(cells) == len(rows) == len(cols)
    return cells, complete


@dataclass
class ErrorEntry:
    address: int
    row: int
    col_or_tile: str
    count: int = 0
    last_delta: str = "0x0"

    @property
    def permanent_candidate(self) -> bool:
        return self.count >= PERMANENT_CANDIDATE_COUNT


class ErrorLog:
    """The guardlinker's error block: fault locations with hit counts."""

    columns = ("address", "row", "col_or_tile", "count", "last_delta_hex")

    def __init__(self):
        self._entries: dict[tuple, ErrorEntry] = {}

    def record(self, address: int, row: int, col_or_tile, delta) -> ErrorEntry:
        key = (address, row, str(col_or_tile))
        entry = self._entries.get(key)
        if entry is None:
            entry = self._entries[key] = ErrorEntry(address, row, str(col_or_tile))
        entry.count += 1
        entry.last_delta = float(delta).hex() if isinstance(delta, float) else hex(int(delta))
        return entry

    def entries(self) -> list[ErrorEntry]:
        return list(self._entries.values())

    def clear(self) -> None:
        self._entries.clear()

    def __len__(self) -> int:
        return len(self._entries)

    def rows(self):
        for e in self._entries.values():
            yield (e.address, e.row, e.col_or_tile, e.count, e.last_delta)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            writer.writerows(self.rows())


@dataclass
class LinkerEntry:
    guardpad_slot: int
    tile: tuple | None
    rows: int
    cols: int


@dataclass
class GuardLinker:
    entries: dict = field(default_factory=dict)
    error_block: ErrorLog = field(default_factory=ErrorLog)


@dataclass
class GuardedBlock:
    """A resident block with its guardpad checksums (a snapshot view)."""

    data: np.ndarray
    row_sums: np.ndarray
    col_sums: np.ndarray
    checksum_width: int
    mask: int


class GuardedMemory:
    """Block-addressed local memory with checksum verify/correct on read.

    Parameters
    ----------
    capacity_rows:
        Number of rows; a block at ``address`` occupies rows
        ``[address, address + R)``.
    row_width:
        Elements per row (the PE-row width of the array).
    dtype:
        Element type (``DType`` or the accumulator ``INT32``).
    mask:
        Bits covered by the checksums; defaults to every bit.
    """

    def __init__(self, capacity_rows: int, row_width: int, dtype, mask=None,
                 linker: GuardLinker | None = None, name: str = "spad"):
        self.capacity_rows = capacity_rows
        self.row_width = row_width
        self.dtype = dtype
        self.width = dtype.width
        self.mask = _mask_value(mask, self.width)
        self.linker = linker if linker is not None else GuardLinker()
        self.name = name
        self._data: dict[int, np.ndarray] = {}
        self.guardpad: dict[int, dict[str, np.ndarray]] = {}
        self._next_slot = 0

    # -- storage -----------------------------------------------------------

    def _check_fit(self, address: int, block: np.ndarray) -> None:
        if block.ndim != 2 or 0 in block.shape:
            raise ValueError("blocks must be non-empty 2-D arrays")
        if block.shape[1] > self.row_width:
            raise ValueError(f"block width {block.shape[1]} exceeds row width {self.row_width}")
        if address < 0 or address + block.shape[0] > self.capacity_rows:
            raise AllocationError(
                f"{self.name}: rows [{address}, {address + block.shape[0]}) exceed capacity {self.capacity_rows}")

    def _store(self, address: int, bits: np.ndarray, row: np.ndarray, col: np.ndarray, tile) -> None:
        self._data[address] = bits
        self.guardpad[address] = {"row": row.astype(np.int64), "col": col.astype(np.int64)}
        entry = self.linker.entries.get(address)
        if entry is None:
            self.linker.entries[address] = LinkerEntry(self._next_slot, tile, *bits.shape)
            self._next_slot += 1
        else:
            entry.tile, entry.rows, entry.cols = tile, *bits.shape

    def mvin(self, address: int, block, tile=None, stream_fault=None) -> None:
        """Write a block; checksums snapshot the stream as it arrives.

        ``stream_fault`` (bits -> bits) corrupts the DMA stream before the
        checksum adder taps it, so such faults are absorbed by design.
        """
        bits = np.array(block, dtype=self.dtype.storage)
        self._check_fit(address, bits)
        if stream_fault is not None:
            bits = np.asarray(stream_fault(bits), dtype=self.dtype.storage)
        row, col = checksum_generate(bits, self.mask, self.width)
        self._store(address, bits, row, col, tile)

    def writeback(self, address: int, block, tile=None, path_fault=None) -> None:
        """Store verified results: checksums come from the verified block,
        ``path_fault`` then corrupts the data on its way into the array of cells."""
        bits = np.array(block, dtype=self.dtype.storage)
        self._check_fit(address, bits)
        row, col = checksum_generate(bits, self.mask, self.width)
        if path_fault is not None:
            bits = np.asarray(path_fault(bits), dtype=self.dtype.storage)
        self._store(address, bits, row, col, tile)

    def _entry(self, address: int) -> LinkerEntry:
        try:
            return self.linker.entries[address]
        except KeyError:
            raise KeyError(f"{self.name}: no linker entry for address {address}") from None

    def data(self, address: int) -> np.ndarray:
        """Live (mutable) raw patterns of a resident block."""
        self._entry(address)
        return self._data[address]

    def block(self, address: int) -> GuardedBlock:
        self._entry(address)
        gp = self.guardpad[address]
        return GuardedBlock(self._data[address].copy(), gp["row"].copy(), gp["col"].copy(),
                            self.width, self.mask)

    def __contains__(self, address: int) -> bool:
        return address in self.linker.entries

    # -- verification -------------------------------------------------------

    def verify_and_correct(self, address: int) -> VerifyOutcome:
        entry = self._entry(address)
        bits = self._data[address]
        gp = self.guardpad[address]
        modulus = 1 << self.width
        row_now, col_now = checksum_generate(bits, self.mask, self.width)
        row_d = (gp["row"] - row_now) % modulus
        col_d = (gp["col"] - col_now) % modulus
        row_deltas = {int(r): int(row_d[r]) for r in np.flatnonzero(row_d)}
        col_deltas = {int(c): int(col_d[c]) for c in np.flatnonzero(col_d)}
        latency = verify_latency(entry.rows, entry.cols)
        outcome = VerifyOutcome(VerifyStatus.CLEAN, row_deltas=row_deltas,
                                col_deltas=col_deltas, latency_cycles=latency)
        log = self.linker.error_block
        if not row_deltas and not col_deltas:
            return outcome
        if not row_deltas or not col_deltas:
            # only one checksum family disagrees: the checksum itself is wrong
            axis, fresh, bad = ("row", row_now, row_deltas) if row_deltas else ("col", col_now, col_deltas)
            for idx in bad:
                gp[axis][idx] = fresh[idx]
                outcome.repaired.append((axis, idx))
                log.record(address, idx if axis == "row" else -1,
                           f"guardpad-{axis}" if axis == "row" else f"guardpad-col{idx}", bad[idx])
            outcome.status = VerifyStatus.CHECKSUM_REPAIRED
            outcome.latency_cycles += 1
            return outcome

        cells, complete = localise(row_deltas, col_deltas)
        if complete is None:
            # one line with several faulty cells: row sum must equal the column deltas' sum
            if len(row_deltas) == 1:
                (r, rd), = row_deltas.items()
                complete = sum(col_deltas.values()) % modulus == rd
            else:
                (c, cd), = col_deltas.items()
                complete = sum(row_deltas.values()) % modulus == cd
            if not complete:
                cells = []
        before = bits.copy()
        applied = []
        for r, c, delta in cells:
            field_now = int(bits[r, c]) & self.mask
            fixed = (field_now + delta) % modulus
            if fixed & ~self.mask:
                complete = False
                continue
            bits[r, c] = (int(bits[r, c]) & ~self.mask) | fixed
            applied.append((r, c, delta))
        if complete:
            row_chk, col_chk = checksum_generate(bits, self.mask, self.width)
            if not (np.array_equal(row_chk, gp["row"]) and np.array_equal(col_chk, gp["col"])):
                bits[...] = before
                applied, complete = [], False
        outcome.corrections = applied
        outcome.latency_cycles += 1
        for r, c, delta in applied:
            log.record(address, r, c, delta)
        if complete:
            outcome.status = VerifyStatus.CORRECTED
        else:
            outcome.status = VerifyStatus.UNCORRECTABLE
            r0 = min(row_deltas) if row_deltas else -1
            c0 = min(col_deltas) if col_deltas else -1
            log.record(address, r0, f"uncorrectable-col{c0}", 0)
        return outcome

    def read(self, address: int, rows=None, cols=None, verify: bool = True):
        """Verified read of a (sub-)block.

        Returns ``(bits, row_sums, col_sums, outcome)``; checksums are
        regenerated over exactly the returned sub-block.
        """
        outcome = self.verify_and_correct(address) if verify else None
        bits = self._data[address]
        sub = bits[rows if rows is not None else slice(None), cols if cols is not None else slice(None)]
        sub = np.array(sub, ndmin=2)
        row, col = checksum_generate(sub, self.mask, self.width)
        return sub, row, col, outcome

    def mvout_error_block(self, clear: bool = False) -> list[ErrorEntry]:
        entries = [ErrorEntry(e.address, e.row, e.col_or_tile, e.count, e.last_delta)
                   for e in self.linker.error_block.entries()]
        if clear:
            self.linker.error_block.clear()
        return entries


def mvout_error_block(mem: GuardedMemory, clear: bool = False) -> list[ErrorEntry]:
    return mem.mvout_error_block(clear)


def block_dtype_bits(dtype) -> int:
    return dtype.width


__all__ = [
    "DType", "GuardedMemory", "GuardLinker", "ErrorLog", "ErrorEntry", "VerifyOutcome",
    "VerifyStatus", "checksum_generate", "localise", "mvout_error_block", "verify_latency",
]
