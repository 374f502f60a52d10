"""Guarded nonlinear operators.

LayerNorm and Softmax are verified through properties of their outputs (the
centred, normalised activations sum to zero; softmax outputs sum to one).
Element-wise and pooling operators have no such invariant and are instead
run on redundant copies and voted.

Operators compute in float64, round to the output dtype and hand back raw
patterns as well as values so faults can be injected into output words.
Each ``fault`` hook maps an array of raw patterns to a corrupted copy.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

import numpy as np

from .numerics import DType, from_bits, to_bits

BitsHook = Callable[[np.ndarray], np.ndarray]

# Default invariant tolerances.  The bf16 values sit above bf16 output
# rounding (unit roundoff 2**-8) so that clean runs never fail.
SOFTMAX_TOLERANCE = {DType.FP32: 2.0 ** -20, DType.BF16: 2.0 ** -6}
LAYERNORM_FP32_FACTOR = 2.0 ** -16
LAYERNORM_BF16_FACTOR = 2.0 ** -6


class Op(Enum):
    RELU = "relu"
    GELU = "gelu"
    MAXPOOL = "maxpool"
    AVGPOOL = "avgpool"


@dataclass(frozen=True)
class Check:
    passed: bool
    measured: float
    expected: float
    tolerance: float


@dataclass
class GuardedResult:
    """Operator output with its verification verdict.

    ``votes`` holds, per output element, how many replicas agreed with the
    emitted value (redundant operators only); ``corrected`` counts elements
    where a minority replica was outvoted.
    """

    output: np.ndarray
    bits: np.ndarray
    check: Check
    votes: np.ndarray | None = None
    corrected: int = 0

    @property
    def passed(self) -> bool:
        return self.check.passed

    @property
    def detected(self) -> bool:
        return not self.check.passed or self.corrected > 0


def _emit(values64: np.ndarray, dtype: DType, fault: BitsHook | None):
    if dtype is DType.INT8:
        bits = to_bits(np.clip(np.rint(values64), -128, 127).astype(np.int64), dtype)
    else:
        bits = to_bits(values64, dtype)
    if fault is not None:
        bits = np.asarray(fault(bits.copy()), dtype=dtype.storage)
    return bits, from_bits(bits, dtype)


def _vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("expected a non-empty vector")
    return x


def layernorm_tolerance(z: np.ndarray, dtype: DType) -> float:
    """Allowed |sum| of the normalised activations ``z`` at ``dtype`` precision."""
    with np.errstate(all="ignore"):
        if dtype is DType.BF16:
            return LAYERNORM_BF16_FACTOR * float(np.abs(z).sum())
        return z.size * LAYERNORM_FP32_FACTOR * float(np.abs(z).max())


def layernorm_guarded(x, gamma=1.0, beta=0.0, epsilon: float = 1e-5,
                      dtype: DType = DType.FP32, fault: BitsHook | None = None,
                      tolerance: float | None = None) -> GuardedResult:
    """LayerNorm whose centred, normalised activations are checked to sum to zero.

    ``fault`` corrupts the normalised activations before the check; the
    affine step then consumes the (possibly corrupted) values.
    """
    x = _vector(x)
    if x.size < 2:
        raise ValueError("layernorm needs at least two elements")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    centred = x - x.mean()
    z64 = centred / np.sqrt((centred ** 2).mean() + epsilon)
    bits, z = _emit(z64, dtype, fault)
    with np.errstate(all="ignore"):
        z = z.astype(np.float64)
        measured = float(z.sum())
        tau = layernorm_tolerance(z, dtype) if tolerance is None else tolerance
        y = np.asarray(gamma, np.float64) * z + np.asarray(beta, np.float64)
    passed = bool(np.isfinite(measured) and abs(measured) <= tau)
    out_bits, out = _emit(y, dtype, None)
    return GuardedResult(out, out_bits, Check(passed, measured, 0.0, tau))


def softmax_guarded(x, dtype: DType = DType.FP32, fault: BitsHook | None = None,
                    tolerance: float | None = None) -> GuardedResult:
    """Max-subtracted softmax whose outputs are checked to sum to one."""
    x = _vector(x)
    with np.errstate(all="ignore"):
        e = np.exp(x - x.max())
        y64 = e / e.sum()
    bits, y = _emit(y64, dtype, fault)
    with np.errstate(all="ignore"):
        measured = float(y.astype(np.float64).sum())
    tau = SOFTMAX_TOLERANCE[dtype] if tolerance is None else tolerance
    passed = bool(np.isfinite(measured) and abs(measured - 1.0) <= tau)
    return GuardedResult(y, bits, Check(passed, measured, 1.0, tau))


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def _pool(x, window: int, reduce):
    n = x.shape[-1] // window
    if n == 0:
        raise ValueError(f"pool window {window} larger than input width {x.shape[-1]}")
    return reduce(x[..., : n * window].reshape(*x.shape[:-1], n, window), axis=-1)


def apply_op(op: Op | str, x, window: int = 2) -> np.ndarray:
    """Reference evaluation of ``op`` in float64."""
    op = Op(op)
    x = np.asarray(x, dtype=np.float64)
    if op is Op.RELU:
        return np.maximum(x, 0.0)
    if op is Op.GELU:
        return _gelu(x)
    if op is Op.MAXPOOL:
        return _pool(x, window, np.max)
    return _pool(x, window, np.mean)


def redundant_apply(op: Op | str, x, copies: int = 3, dtype: DType = DType.FP32,
                    faults: Mapping[int, BitsHook] | None = None,
                    window: int = 2) -> GuardedResult:
    """Evaluate ``op`` on ``copies`` replicas and vote on the raw outputs.

    Three copies: per-element majority, a lone dissenter is outvoted and
    three distinct patterns fail.  Two copies detect any disagreement but
    cannot tell which replica is right; replica 0 is emitted.
    """
    if copies not in (1, 2, 3):
        raise ValueError("copies must be 1 (unprotected), 2 or 3")
    faults = faults or {}
    clean = apply_op(op, x, window)
    replicas = np.stack([_emit(clean, dtype, faults.get(c))[0] for c in range(copies)])
    first = replicas[0]
    if copies == 1:
        return GuardedResult(from_bits(first, dtype), first, Check(True, 0.0, 0.0, 0.0),
                             np.ones(first.shape, np.int8))
    if copies == 2:
        agree = replicas[0] == replicas[1]
        mismatches = int((~agree).sum())
        votes = np.where(agree, 2, 1).astype(np.int8)
        return GuardedResult(from_bits(first, dtype), first,
                             Check(mismatches == 0, float(mismatches), 0.0, 0.0), votes)
    a, b, c = replicas
    ab, ac, bc = a == b, a == c, b == c
    out = np.where(ab | ac, a, np.where(bc, b, a))
    votes = np.where(ab & ac, 3, np.where(ab | ac | bc, 2, 1)).astype(np.int8)
    split = ~(ab | ac | bc)
    outvoted = int(((ab | ac | bc) & ~(ab & ac)).sum())
    return GuardedResult(from_bits(out, dtype), out,
                         Check(not split.any(), float(split.sum()), 0.0, 0.0), votes, outvoted)
