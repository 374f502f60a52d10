"""Systolic array model and its decoupled shield group.

The array computes ``C = A @ B + D`` on N x N tile-groups (``N = I * J``)
in weight-stationary (WS) or output-stationary (OS) mode.  The shield group
predicts the row and column sums of C from operand checksums, the verifier
compares them with the sums of the produced C, and the corrector repairs
single cells or localises persistent faults to a tile.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import kernels
from .kernels._vector import _quiet
from .errors import ConfigurationError
from .guarded_memory import localise
from .numerics import DType, round_to, wrap_int32

REPORTING_FREQUENCY_HZ = 500e6

# Relative verification tolerances for float outputs; see ``shield_verify``.
FLOAT_TOLERANCE = {DType.FP32: 2.0 ** -18, DType.BF16: 2.0 ** -10}


class Mode(Enum):
    WS = "ws"
    OS = "os"


@dataclass(frozen=True)
class ArrayGeometry:
    """``tiles`` tiles per row, ``pes_per_tile`` PEs per row within a tile."""

    tiles: int
    pes_per_tile: int
    mode: Mode = Mode.WS

    def __post_init__(self):
        if self.tiles < 1 or self.pes_per_tile < 1:
            raise ConfigurationError("tiles and PEs per tile must be >= 1")
        if not isinstance(self.mode, Mode):
            object.__setattr__(self, "mode", Mode(str(self.mode).lower()))

    @property
    def n(self) -> int:
        return self.tiles * self.pes_per_tile

    @property
    def array_window(self) -> int:
        """Cycles from first input arrival to last output departure."""
        return self.n + 2 * self.tiles - 1

    def tile_of(self, index: int) -> int:
        return index // self.pes_per_tile


# Named geometries used for the default and industrial INT8 configurations.
INT8_D = ArrayGeometry(16, 1)
INT8_I = ArrayGeometry(32, 4)


def adder_depth_term(geometry: ArrayGeometry) -> int:
    """``max(0, floor(log2(ceil(N / 2**J)) / J))`` evaluated in exact integers."""
    j = geometry.pes_per_tile
    m = -(-geometry.n // (1 << j))
    return (m.bit_length() - 1) // j


def shield_latency(geometry: ArrayGeometry, shields: int) -> int:
    """Cycles for K shields to process both operand matrices of one group."""
    tree = adder_depth_term(geometry) + 1
    return -(-2 * geometry.n // shields) + 1 + tree


def minimum_shields(geometry: ArrayGeometry) -> int:
    denom = geometry.n + 2 * geometry.tiles - 3 - adder_depth_term(geometry)
    if denom <= 0:
        raise ConfigurationError(
            f"no shield count fits the {geometry.array_window}-cycle window of "
            f"geometry I={geometry.tiles}, J={geometry.pes_per_tile}")
    return -(-2 * geometry.n // denom)


@dataclass(frozen=True)
class ShieldConfig:
    geometry: ArrayGeometry
    shields: int
    sigma: int
    array_window: int
    tree_depth: int

    @property
    def stage_tree_depth(self) -> int:
        """Adder levels per pipeline stage; deeper trees are pipelined over J-level stages."""
        return min(self.geometry.pes_per_tile, self.tree_depth)

    def to_dict(self) -> dict:
        g = self.geometry
        return {"tiles": g.tiles, "pes_per_tile": g.pes_per_tile, "mode": g.mode.value,
                "n": g.n, "shields": self.shields, "sigma": self.sigma,
                "array_window": self.array_window, "tree_depth": self.tree_depth,
                "stage_tree_depth": self.stage_tree_depth}


def configure_shields(geometry: ArrayGeometry) -> ShieldConfig:
    shields = minimum_shields(geometry)
    sigma = shield_latency(geometry, shields)
    window = geometry.array_window
    if sigma > window:
        raise ConfigurationError(f"shield latency {sigma} exceeds array window {window}")
    config = ShieldConfig(geometry, shields, sigma, window, adder_depth_term(geometry) + 1)
    assert config.stage_tree_depth <= geometry.pes_per_tile
    return config


# --------------------------------------------------------------------------- timing

@dataclass(frozen=True)
class TimingReport:
    num_groups: int
    baseline_cycles: int
    protected_cycles: int
    slowdown: float
    worst_detection_latency_cycles: int
    stages: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def stage_cycles(config: ShieldConfig) -> dict:
    n = config.geometry.n
    return {
        "checksum_a": n,
        "preload_b": n,
        "compute": max(config.array_window, config.sigma),
        "verify_correct": -(-n // config.shields) + config.tree_depth + 1,
    }


def pipeline_schedule(num_groups: int, config: ShieldConfig) -> TimingReport:
    """Four-stage overlap model of protected vs unprotected tile-group execution.

    Only the first group's operand checksum and the last group's
    verify/correct stage are exposed; everything else hides behind the
    preload and compute stages of neighbouring groups.
    """
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    s = stage_cycles(config)
    baseline = num_groups * (s["preload_b"] + config.array_window)
    protected = (s["checksum_a"] + num_groups * (s["preload_b"] + s["compute"])
                 + s["verify_correct"])
    return TimingReport(num_groups, baseline, protected, protected / baseline,
                        s["compute"] + s["verify_correct"], s)


def component_latencies(config: ShieldConfig, nonlinear_width: int | None = None) -> dict:
    """Worst-case detection latency (cycles) per protected component.

    Anchors: register reads at read issue, memory at read issue of the
    block, the array at compute issue (verification is deferred until the
    whole group has left the array), nonlinear checks at output emission.
    """
    from .guarded_memory import verify_latency

    n = config.geometry.n
    width = nonlinear_width or n
    return {
        "register": 1,
        "memory": verify_latency(n, n) + 1,
        "array": pipeline_schedule(1, config).worst_detection_latency_cycles,
        "nonlinear": max(1, math.ceil(math.log2(width))) + 2,
    }


# --------------------------------------------------------------------------- compute

@dataclass
class ArrayFaults:
    """Per-PE fault masks in the layout the gemm kernels consume.

    ``act_xor``/``psum_xor`` are ``[i, k, j]`` one-shot masks for the pass
    of operand element ``(i, k)`` through PE column ``j``.  ``*_or`` /
    ``*_andn`` are per-PE stuck-at masks indexed by PE coordinates.
    Activation bits use the element width, partial-sum bits the accumulator.
    """

    act_xor: np.ndarray
    act_or: np.ndarray
    act_andn: np.ndarray
    psum_xor: np.ndarray
    psum_or: np.ndarray
    psum_andn: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ArrayFaults":
        z3, z2 = np.zeros((n, n, n), np.int64), np.zeros((n, n), np.int64)
        return cls(z3, z2, z2.copy(), z3.copy(), z2.copy(), z2.copy())

    def any(self) -> bool:
        return any(m.any() for m in (self.act_xor, self.act_or, self.act_andn,
                                     self.psum_xor, self.psum_or, self.psum_andn))


def _check_square(name: str, m: np.ndarray, n: int | None) -> int:
    if m.ndim != 2 or m.shape[0] != m.shape[1] or (n is not None and m.shape[0] != n):
        want = f"{n}x{n}" if n is not None else "square"
        raise ValueError(f"{name} has shape {m.shape}, expected {want}")
    return m.shape[0]


def _operands(a, b, d, geometry, dtype):
    n = geometry.n if geometry is not None else None
    a, b, d = (np.asarray(x) for x in (a, b, d))
    n = _check_square("A", a, n)
    _check_square("B", b, n)
    _check_square("D", d, n)
    if dtype.is_float:
        a, b = round_to(a, dtype), round_to(b, dtype)
        d = np.asarray(d, np.float32)
    else:
        a, b, d = (np.asarray(x, np.int64) for x in (a, b, d))
    return a, b, d


def gemm(a, b, d, geometry: ArrayGeometry | None = None, dtype: DType = DType.INT8,
         faults: ArrayFaults | None = None) -> np.ndarray:
    """``C = A @ B + D`` with accumulator-width arithmetic.

    INT8 operands produce wrapped int32 values (returned as int64); float
    operands accumulate in float32 in k order.  With ``faults`` the per-PE
    kernel runs so flips land at their modeled PE positions.
    """
    a, b, d = _operands(a, b, d, geometry, dtype)
    ws = geometry is None or geometry.mode is Mode.WS
    if faults is not None and faults.any():
        if dtype.is_float:
            shift = 16 if dtype is DType.BF16 else 0
            a_bits = np.ascontiguousarray(a, np.float32).view(np.uint32).astype(np.int64)
            return kernels.array_gemm_float(
                a_bits, np.ascontiguousarray(b, np.float32), np.ascontiguousarray(d, np.float32),
                faults.act_xor << shift, faults.act_or << shift, faults.act_andn << shift,
                faults.psum_xor, faults.psum_or, faults.psum_andn, ws)
        return kernels.array_gemm_int(
            a & 0xFF, b, d, faults.act_xor, faults.act_or, faults.act_andn,
            faults.psum_xor, faults.psum_or, faults.psum_andn, ws)
    if dtype.is_float:
        # same k-ordered float32 accumulation as the per-PE kernel
        acc = np.zeros(a.shape, np.float32) if ws else d.copy()
        with np.errstate(all="ignore"):
            for k in range(a.shape[0]):
                acc = _quiet(acc + a[:, k, None] * b[None, k, :])
            if ws:
                acc = _quiet(acc + d)
        return acc
    return wrap_int32(a @ b + d)


def transpose_stream(b, with_checksums: bool = False):
    """Transpose as the operand streams into the shield group.

    With ``with_checksums`` also returns ``(row_sums, col_sums)`` of B, the
    row sums being the vector whose dot with a row of A predicts a row sum of C.
    """
    b = np.asarray(b)
    _check_square("B", b, None)
    bt = b.T.copy()
    if not with_checksums:
        return bt
    acc = np.float64 if b.dtype.kind == "f" else np.int64
    return bt, (b.sum(axis=1, dtype=acc), bt.sum(axis=1, dtype=acc))


@dataclass
class ShieldChecksums:
    row_check: np.ndarray
    col_check: np.ndarray
    # Magnitude bound of each predicted sum; sets the float tolerance.
    row_scale: np.ndarray | None = None
    col_scale: np.ndarray | None = None


def numeric_sums(m, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Row and column sums of an output-typed matrix (wrapped for integers)."""
    if dtype.is_float:
        m = np.asarray(m, np.float64)
        return m.sum(axis=1), m.sum(axis=0)
    m = np.asarray(m, np.int64)
    return wrap_int32(m.sum(axis=1)), wrap_int32(m.sum(axis=0))


def shield_checksums(a, b, d_row_sums, d_col_sums, dtype: DType = DType.INT8,
                     d_abs_sums=None) -> ShieldChecksums:
    """Predict row and column sums of ``A @ B + D``.

    ``d_row_sums``/``d_col_sums`` come from the accumulator guardpad for
    integer outputs (any wrap-equivalent form) and from the preload adder
    for floats.  ``d_abs_sums`` (row, col) bound |D| for the float tolerance.
    """
    a, b = np.asarray(a), np.asarray(b)
    if dtype.is_float:
        a64, b64 = round_to(a, dtype).astype(np.float64), round_to(b, dtype).astype(np.float64)
        sb, sa = b64.sum(axis=1), a64.sum(axis=0)
        row = a64 @ sb + np.asarray(d_row_sums, np.float64)
        col = sa @ b64 + np.asarray(d_col_sums, np.float64)
        abs_a, abs_b = np.abs(a64), np.abs(b64)
        row_scale = abs_a @ abs_b.sum(axis=1)
        col_scale = abs_a.sum(axis=0) @ abs_b
        if d_abs_sums is not None:
            row_scale = row_scale + d_abs_sums[0]
            col_scale = col_scale + d_abs_sums[1]
        return ShieldChecksums(row, col, row_scale, col_scale)
    a, b = a.astype(np.int64), b.astype(np.int64)
    _, (sb, _) = transpose_stream(b, with_checksums=True)
    sa = a.sum(axis=0)
    row = wrap_int32(a @ sb + np.asarray(d_row_sums, np.int64))
    col = wrap_int32(sa @ b + np.asarray(d_col_sums, np.int64))
    return ShieldChecksums(row, col)


class ArrayStatus(Enum):
    CLEAN = "clean"
    CORRECTED = "corrected"
    TILE_FAULT = "tile_fault"
    UNCORRECTABLE = "uncorrectable"


@dataclass
class ArrayOutcome:
    status: ArrayStatus
    corrections: list = field(default_factory=list)   # (row, col, delta)
    tile: tuple | None = None
    row_deltas: dict = field(default_factory=dict)
    col_deltas: dict = field(default_factory=dict)
    detection_latency_cycles: int = 0

    @property
    def detected(self) -> bool:
        return self.status is not ArrayStatus.CLEAN

    def flags(self, row: int, col: int) -> bool:
        return row in self.row_deltas or col in self.col_deltas


def _mismatches(c, checks: ShieldChecksums, dtype, tolerance):
    rows, cols = numeric_sums(c, dtype)
    if not dtype.is_float:
        rd = wrap_int32(checks.row_check - rows)
        cd = wrap_int32(checks.col_check - cols)
        return ({int(i): int(rd[i]) for i in np.flatnonzero(rd)},
                {int(j): int(cd[j]) for j in np.flatnonzero(cd)})
    tau = FLOAT_TOLERANCE[dtype] if tolerance is None else tolerance
    out = []
    for check, got, scale in ((checks.row_check, rows, checks.row_scale),
                              (checks.col_check, cols, checks.col_scale)):
        ref = np.abs(check) if scale is None else np.maximum(np.abs(check), scale)
        with np.errstate(all="ignore"):
            diff = check - got
            bad = ~np.isfinite(diff) | (np.abs(diff) > tau * np.maximum(ref, 1.0))
        out.append({int(i): float(diff[i]) for i in np.flatnonzero(bad)})
    return out[0], out[1]


def _line_cells(row_deltas, col_deltas):
    """Cells of a one-row or one-column pattern, or ``([], False)`` if inconsistent."""
    cells, complete = localise(row_deltas, col_deltas, require_distinct=False)
    if complete is None:
        line = row_deltas if len(row_deltas) == 1 else col_deltas
        complete = wrap_int32(sum(d for _, _, d in cells)) == next(iter(line.values()))
    return (cells, True) if complete else ([], False)


def _int_cells(row_deltas, col_deltas):
    """Explain integer mismatches as a set of faulty cells.

    Uniquely matching (row, column) delta pairs are peeled off until what
    remains is empty or a single row or column.
    """
    rows, cols, cells = dict(row_deltas), dict(col_deltas), []
    while rows and cols:
        if len(rows) == 1 or len(cols) == 1:
            line, ok = _line_cells(rows, cols)
            return (cells + line, True) if ok else ([], False)
        pairs = []
        for r, d in rows.items():
            hits = [c for c, cd in cols.items() if cd == d]
            if len(hits) == 1 and [rr for rr, rd in rows.items() if rd == d] == [r]:
                pairs.append((r, hits[0], d))
        if not pairs:
            return [], False
        for r, c, d in pairs:
            cells.append((r, c, d))
            del rows[r], cols[c]
    return (cells, True) if not rows and not cols else ([], False)


def _float_cells(row_deltas, col_deltas):
    rows, cols = sorted(row_deltas), sorted(col_deltas)
    if len(rows) == 1:
        return [(rows[0], j, "col") for j in cols]
    if len(cols) == 1:
        return [(i, cols[0], "row") for i in rows]
    return []


def shield_verify(c, checks: ShieldChecksums, geometry: ArrayGeometry | None = None,
                  dtype: DType = DType.INT8, tolerance: float | None = None,
                  latency: int = 0) -> ArrayOutcome:
    """Compare C against the predicted sums and repair it in place when possible.

    Corrected patterns: one faulty cell; several cells in one row (or one
    column) whose deltas add up to that line's delta; and cells whose row
    and column deltas pair uniquely, possibly leaving one such line.  Any
    other pattern touching several rows and columns is localised to a tile:
    the earliest mismatching column in WS mode (faults travel rightward with
    the activations) and the earliest mismatching row and column in OS
    mode.  Mismatches on one axis only are uncorrectable.
    """
    geometry = geometry or ArrayGeometry(np.asarray(c).shape[0], 1)
    os_mode = geometry.mode is Mode.OS
    row_deltas, col_deltas = _mismatches(c, checks, dtype, tolerance)
    outcome = ArrayOutcome(ArrayStatus.CLEAN, row_deltas=row_deltas, col_deltas=col_deltas,
                           detection_latency_cycles=latency)
    if not row_deltas and not col_deltas:
        return outcome
    if not row_deltas or not col_deltas:
        outcome.status = ArrayStatus.UNCORRECTABLE
        return outcome

    before = np.array(c, copy=True)
    applied = []
    if dtype.is_float:
        c64 = np.asarray(c, np.float64)
        for i, j, axis in _float_cells(row_deltas, col_deltas):
            if axis == "col":
                value = checks.col_check[j] - (c64[:, j].sum() - c64[i, j])
            else:
                value = checks.row_check[i] - (c64[i, :].sum() - c64[i, j])
            applied.append((i, j, float(value - c64[i, j])))
        for i, j, delta in applied:
            c[i, j] = np.float32(c64[i, j] + delta)
    else:
        cells, complete = _int_cells(row_deltas, col_deltas)
        if complete:
            for i, j, delta in cells:
                c[i, j] = wrap_int32(int(c[i, j]) + delta)
            applied = cells
    if applied:
        again_r, again_c = _mismatches(c, checks, dtype, tolerance)
        if not again_r and not again_c:
            outcome.status = ArrayStatus.CORRECTED
            outcome.corrections = applied
            return outcome
        c[...] = before
    i0, j0 = min(row_deltas), min(col_deltas)
    outcome.status = ArrayStatus.TILE_FAULT
    outcome.tile = ((geometry.tile_of(i0), geometry.tile_of(j0)) if os_mode
                    else (geometry.tile_of(j0),))
    return outcome
