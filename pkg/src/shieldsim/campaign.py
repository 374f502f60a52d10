"""Fault-injection campaigns over desk-scale workloads.

One trial runs a workload through the modeled accelerator pass by pass
(one pass = one N x N x N tile-group):

1. registers are read through SEC-DED;
2. operands A (activations), B (weights) and D (bias or running
   accumulator) sit in guarded memory, are exposed to residency faults and
   verified/corrected on read;
3. the array computes ``C = A @ B + D`` while the shield group predicts its
   checksums, then the verifier/corrector runs;
4. C is written back to the accumulator and verified on its next read;
5. after the last k-tile of a hidden layer, C is requantised and the
   activation runs on redundant copies.

Each injected event is classified against a fault-free evaluation of the
same stage from the same inputs: unexposed (no bit changed), corrected,
detected (flagged but not restored) or missed.  The same fault plan is
replayed with protection off to measure silent corruption.
"""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import faults as fi
from .ecc import DecodeStatus, RegisterFile, secded_encode
from .errors import ConfigurationError
from .faults import FaultPlan, Site, SiteSpec
from .guarded_memory import GuardedMemory, VerifyStatus
from .mlp import Model, gemm_chain, requantise, tiny_mlp
from .nonlinear import redundant_apply
from .numerics import INT32, DType, MaskPolicy, from_bits, protection_mask, to_bits, wrap_int32
from .systolic import (ArrayGeometry, ArrayStatus, Mode, component_latencies, configure_shields,
                       gemm, numeric_sums, pipeline_schedule, shield_checksums, shield_verify,
                       stage_cycles)

# MvinStream faults are folded into the checksums by design and ArrayInput is
# optional in the default mix; both can be listed explicitly in a config.
DEFAULT_SITES = ("MemoryResidency", "PEPartialSum", "ArrayInput", "Writeback",
                 "GuardpadCell", "RegisterBit", "NonlinearOutput")

REGISTERS = (("scale_shift", 8), ("act_mode", 8), ("stride", 16))

COMPONENT = {
    Site.MVIN_STREAM: "memory", Site.MEMORY_RESIDENCY: "memory", Site.GUARDPAD_CELL: "memory",
    Site.WRITEBACK: "memory", Site.ARRAY_INPUT: "array", Site.PE_PARTIAL_SUM: "array",
    Site.REGISTER_BIT: "register", Site.NONLINEAR_OUTPUT: "nonlinear",
}

# Relative tolerance for calling a float array correction exact.
FLOAT_MATCH = 2.0 ** -10


# --------------------------------------------------------------------------- config

@dataclass
class Protection:
    registers: bool = True
    memory: bool = True
    array: bool = True
    nonlinear: bool = True
    mask_policy: str = "top_sensitive"
    nonlinear_copies: int = 3

    @classmethod
    def off(cls) -> "Protection":
        return cls(False, False, False, False)

    @property
    def any(self) -> bool:
        return self.registers or self.memory or self.array or self.nonlinear


@dataclass
class WorkloadSpec:
    kind: str = "tiny_mlp"          # or "single_gemm"
    dims: tuple = (64, 32, 10)
    samples: int = 160
    dataset_seed: int = 0
    groups: int = 4                 # single_gemm: chained square layers

    def __post_init__(self):
        self.dims = tuple(self.dims)
        if self.kind not in ("tiny_mlp", "single_gemm"):
            raise ConfigurationError(f"unknown workload kind {self.kind!r}")
        if self.samples < 1:
            raise ConfigurationError("samples must be >= 1")


@dataclass
class FaultSpec:
    rates: list = field(default_factory=lambda: [1e-4])
    sites: list = field(default_factory=lambda: list(DEFAULT_SITES))
    weights: dict = field(default_factory=dict)
    permanent: list = field(default_factory=list)   # {site, target, index, bit, value}

    def __post_init__(self):
        for s in list(self.sites) + list(self.weights):
            try:
                Site(s)
            except ValueError:
                raise ConfigurationError(f"unknown exposure site {s!r}") from None
        for r in self.rates:
            if not 0.0 <= float(r) <= 1.0:
                raise ConfigurationError(f"rate {r} outside [0, 1]")


@dataclass
class CampaignConfig:
    tiles: int = 16
    pes_per_tile: int = 1
    mode: str = "ws"
    dtype: str = "int8"
    protection: Protection = field(default_factory=Protection)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    faults: FaultSpec = field(default_factory=FaultSpec)
    trials: int = 10
    seed: int = 0
    workers: int = 1
    frequency_hz: float = 500e6

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        try:
            DType.parse(self.dtype)
            Mode(self.mode)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        if self.protection.nonlinear_copies not in (2, 3):
            raise ConfigurationError("nonlinear_copies must be 2 or 3")
        self.geometry  # validates I, J

    @property
    def geometry(self) -> ArrayGeometry:
        try:
            return ArrayGeometry(self.tiles, self.pes_per_tile, Mode(self.mode))
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    @property
    def element_type(self) -> DType:
        return DType.parse(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["workload"]["dims"] = list(self.workload.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CampaignConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        try:
            d["protection"] = Protection(**d.get("protection", {}))
            d["workload"] = WorkloadSpec(**d.get("workload", {}))
            d["faults"] = FaultSpec(**d.get("faults", {}))
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------- workload

@dataclass
class PreparedWorkload:
    model: Model
    inputs: np.ndarray          # quantised samples, rows padded to a multiple of N
    labels: np.ndarray | None
    samples: int


@lru_cache(maxsize=8)
def _prepare_cached(kind, dims, samples, dataset_seed, groups, dtype_label, n):
    dtype = DType.parse(dtype_label)
    if kind == "tiny_mlp":
        model, data = tiny_mlp(dtype, dims, seed=dataset_seed,
                               n_test=max(samples, 1))
        x = model.quantise_input(data.x_test[:samples])
        labels = data.y_test[:samples]
    else:
        model, x = gemm_chain(n, groups, dtype, seed=dataset_seed, rows=samples)
        labels = None
    rows = -(-samples // n) * n
    pad = np.zeros((rows, x.shape[1]), dtype=x.dtype)
    pad[:samples] = x
    return PreparedWorkload(model, pad, labels, samples)


def prepare_workload(spec: WorkloadSpec, dtype: DType, n: int) -> PreparedWorkload:
    return _prepare_cached(spec.kind, tuple(spec.dims), spec.samples, spec.dataset_seed,
                           spec.groups, dtype.label, n)


def _pad_to(m: np.ndarray, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=m.dtype)
    out[: m.shape[0], : m.shape[1]] = m
    return out


@dataclass
class PassInfo:
    index: int
    batch: int
    layer: int
    col_tile: int
    k_tile: int
    first_k: bool
    last_k: bool
    activation: bool      # hidden layer: requantise + activation after the last k-tile


def pass_schedule(model: Model, rows: int, n: int) -> list[PassInfo]:
    out = []
    for b in range(rows // n):
        for li, layer in enumerate(model.layers):
            k_tiles = -(-layer.weights.shape[0] // n)
            c_tiles = -(-layer.weights.shape[1] // n)
            hidden = li < len(model.layers) - 1
            for t in range(c_tiles):
                for q in range(k_tiles):
                    out.append(PassInfo(len(out), b, li, t, q, q == 0, q == k_tiles - 1, hidden))
    return out


def exposure_sites(info: PassInfo, n: int, dtype: DType, sites, weights: dict,
                   register_widths: dict) -> list[SiteSpec]:
    """Exposure surfaces of one pass restricted to the enabled site kinds."""
    w, acc = dtype.width, 32
    wanted = {Site(s) for s in sites}
    weight = {Site(k): float(v) for k, v in weights.items()}
    specs = []

    def add(site, target, shape, width):
        if site in wanted:
            specs.append(SiteSpec(site, target, shape, width, weight.get(site, 1.0)))

    add(Site.MVIN_STREAM, "A", (n, n), w)
    add(Site.MVIN_STREAM, "B", (n, n), w)
    if info.first_k:
        add(Site.MVIN_STREAM, "acc", (n, n), acc)
    add(Site.MEMORY_RESIDENCY, "A", (n, n), w)
    add(Site.MEMORY_RESIDENCY, "B", (n, n), w)
    add(Site.MEMORY_RESIDENCY, "acc", (n, n), acc)
    add(Site.GUARDPAD_CELL, "A", (2 * n,), w)
    add(Site.GUARDPAD_CELL, "B", (2 * n,), w)
    add(Site.GUARDPAD_CELL, "acc", (2 * n,), acc)
    add(Site.ARRAY_INPUT, "array", (n, n, n), w)
    add(Site.PE_PARTIAL_SUM, "array", (n, n, n), acc)
    add(Site.WRITEBACK, "C", (n, n), acc)
    for reg, width in register_widths.items():
        add(Site.REGISTER_BIT, reg, (), width)
    if info.last_k and info.activation:
        for c in range(3):
            add(Site.NONLINEAR_OUTPUT, f"copy{c}", (n, n), w)
    return specs


def permanent_catalog(n: int, dtype: DType, register_widths: dict) -> dict:
    w = dtype.width
    cat = {}
    for target, shape, width in (("A", (n, n), w), ("B", (n, n), w), ("acc", (n, n), 32)):
        cat[(Site.MEMORY_RESIDENCY, target)] = SiteSpec(Site.MEMORY_RESIDENCY, target, shape, width)
        cat[(Site.GUARDPAD_CELL, target)] = SiteSpec(Site.GUARDPAD_CELL, target, (2 * n,), width)
    cat[(Site.ARRAY_INPUT, "array")] = SiteSpec(Site.ARRAY_INPUT, "array", (n, n), w)
    cat[(Site.PE_PARTIAL_SUM, "array")] = SiteSpec(Site.PE_PARTIAL_SUM, "array", (n, n), 32)
    cat[(Site.WRITEBACK, "C")] = SiteSpec(Site.WRITEBACK, "C", (n, n), 32)
    for reg, width in register_widths.items():
        cat[(Site.REGISTER_BIT, reg)] = SiteSpec(Site.REGISTER_BIT, reg, (), width)
    for c in range(3):
        cat[(Site.NONLINEAR_OUTPUT, f"copy{c}")] = SiteSpec(Site.NONLINEAR_OUTPUT, f"copy{c}", (n, n), w)
    return cat


def _register_widths() -> dict:
    rf = RegisterFile()
    for reg, width in REGISTERS:
        rf.declare(reg, width)
    return {reg: rf.codeword_width(reg) for reg, _ in REGISTERS}


def build_plan(config: CampaignConfig, rate: float, trial: int, rate_index: int = 0) -> FaultPlan:
    """The trial's fault plan: seeded transient flips plus configured stuck-at faults."""
    geometry, dtype = config.geometry, config.element_type
    n = geometry.n
    work = prepare_workload(config.workload, dtype, n)
    schedule = pass_schedule(work.model, work.inputs.shape[0], n)
    reg_widths = _register_widths()
    sites = [exposure_sites(p, n, dtype, config.faults.sites, config.faults.weights, reg_widths)
             for p in schedule]
    # flips per pass scale with the bits of the pass's streamed input tile
    input_bits = n * n * dtype.width
    plan = fi.plan_transient(rate, input_bits, sites, config.seed, len(schedule),
                             (rate_index, trial))
    catalog = permanent_catalog(n, dtype, reg_widths)
    for spec in config.faults.permanent:
        key = (Site(spec["site"]), spec["target"])
        if key not in catalog:
            raise ConfigurationError(f"no permanent-fault location {key[0].value}/{key[1]}")
        plan = plan.merge(fi.plan_permanent(catalog[key], spec.get("index", ()), spec["bit"],
                                            spec["value"]))
    return plan


# --------------------------------------------------------------------------- engine

@dataclass
class Event:
    trial: int
    pass_index: int
    site: str
    target: str
    index: tuple
    bit: int
    permanent: bool
    consequential: bool
    in_mask: bool
    detected: bool
    corrected: bool
    status: str
    latency_cycles: int
    cycle: int

    @property
    def outcome(self) -> str:
        if not self.consequential:
            return "unexposed"
        if self.corrected:
            return "corrected"
        return "detected" if self.detected else "missed"


@dataclass
class TrialResult:
    trial: int
    rate: float
    protected: bool
    events: list
    outputs: np.ndarray
    predictions: np.ndarray
    register_aborts: int = 0
    tile_faults: int = 0
    error_log: list = field(default_factory=list)


def _values_close(a, b, dtype) -> np.ndarray:
    if not dtype.is_float:
        return np.asarray(a) == np.asarray(b)
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    with np.errstate(all="ignore"):
        return (a == b) | (np.abs(a - b) <= FLOAT_MATCH * np.maximum(np.abs(b), 1.0))


class Engine:
    """Executes one trial of a workload under one fault plan."""

    def __init__(self, config: CampaignConfig, plan: FaultPlan, protection: Protection,
                 trial: int = 0):
        self.config = config
        self.plan = plan
        self.protection = protection
        self.trial = trial
        self.geometry = config.geometry
        self.n = self.geometry.n
        self.dtype = config.element_type
        self.acc_type = DType.FP32 if self.dtype.is_float else INT32
        policy = MaskPolicy(protection.mask_policy) if isinstance(protection.mask_policy, str) \
            else protection.mask_policy
        self.spad_mask = protection_mask(self.dtype, policy).mask
        self.acc_mask = (protection_mask(DType.FP32, policy).mask if self.dtype.is_float
                         else 0xFFFFFFFF)
        self.work = prepare_workload(config.workload, self.dtype, self.n)
        self.schedule = pass_schedule(self.work.model, self.work.inputs.shape[0], self.n)
        self.shield = configure_shields(self.geometry)
        self.stages = stage_cycles(self.shield)
        self.latency = component_latencies(self.shield)
        n = self.n
        self.spad = GuardedMemory(4 * n, n, self.dtype, self.spad_mask, name="scratchpad")
        self.accmem = GuardedMemory(2 * n, n, self.acc_type, self.acc_mask, name="accumulator")
        self.addr = {"A": 0, "B": n, "acc": 0}
        self.rf = RegisterFile()
        for reg, width in REGISTERS:
            self.rf.declare(reg, width)
        for e in plan.permanent:
            if e.site is Site.REGISTER_BIT:
                self.rf.set_stuck(e.target, e.bit, e.value)
        self.events: list[Event] = []
        self.register_aborts = 0
        self.tile_faults = 0

    # -- helpers -------------------------------------------------------------

    def _mem(self, target):
        return self.accmem if target == "acc" else self.spad

    def _log(self, p: int, e, consequential: bool, in_mask: bool, detected: bool,
             corrected: bool, status: str) -> None:
        component = COMPONENT[e.site]
        latency = self.latency[component] if detected else 0
        start = self.stages["checksum_a"] + p * (self.stages["preload_b"] + self.stages["compute"])
        self.events.append(Event(
            self.trial, p, e.site.value, e.target, tuple(int(i) for i in e.index), int(e.bit),
            isinstance(e, fi.StuckAt), bool(consequential), bool(in_mask), bool(detected),
            bool(corrected), status, latency, start + latency if detected else -1))

    def _events(self, site: Site, target: str, p: int):
        return list(self.plan.flips(site, target, p)) + list(self.plan.stuck(site, target))

    # -- registers ------------------------------------------------------------

    def _write_registers(self, layer) -> dict:
        values = {"scale_shift": layer.shift & 0xFF, "act_mode": 1 if layer.relu else 0,
                  "stride": self.n}
        for reg, value in values.items():
            self.rf.write(reg, value)
        return values

    def _read_registers(self, p: int, written: dict) -> dict:
        out = {}
        for reg, _ in REGISTERS:
            flips = self.plan.flips(Site.REGISTER_BIT, reg, p)
            before = self.rf.stored(reg).bits
            for e in flips:
                self.rf.flip(reg, e.bit)
            changed = self.rf.stored(reg).bits ^ before
            stuck = self.plan.stuck(Site.REGISTER_BIT, reg)
            if self.protection.registers:
                res = self.rf.read(reg)
                value, status = res.data, res.status
                if status is DecodeStatus.DOUBLE_ERROR:
                    # tile-group aborted; the host rewrites the register and reissues
                    self.register_aborts += 1
                    self.rf.write(reg, written[reg])
                    value = written[reg]
            else:
                value, status = self.rf.read_raw(reg), DecodeStatus.CLEAN
            detected = status is not DecodeStatus.CLEAN
            corrected = status is DecodeStatus.CORRECTED and value == written[reg]
            for e in flips:
                self._log(p, e, bool(changed >> e.bit & 1), True, detected, corrected, status.value)
            clean_bits = secded_encode(written[reg], self.rf.width(reg)).bits
            for e in stuck:
                hit = (clean_bits >> e.bit & 1) != e.value
                self._log(p, e, hit, True, detected, corrected, status.value)
            out[reg] = value
        return out

    # -- memory ---------------------------------------------------------------

    def _expose_block(self, target: str, p: int):
        """Residency and guardpad faults on one resident block; returns clean copies."""
        mem, addr = self._mem(target), self.addr[target]
        data = mem.data(addr)
        gp = mem.guardpad[addr]
        clean = data.copy()
        clean_gp = np.concatenate([gp["row"], gp["col"]])
        if self.plan.touches(Site.MEMORY_RESIDENCY, target, p):
            data[...] = fi.apply(self.plan, Site.MEMORY_RESIDENCY, target, data, p)
        if self.plan.touches(Site.GUARDPAD_CELL, target, p):
            width = mem.width
            flat = fi.apply(self.plan, Site.GUARDPAD_CELL, target, clean_gp, p) & ((1 << width) - 1)
            gp["row"][...] = flat[: self.n]
            gp["col"][...] = flat[self.n:]
        return clean, clean_gp

    def _verify(self, target: str):
        mem, addr = self._mem(target), self.addr[target]
        if self.protection.memory:
            return mem.verify_and_correct(addr)
        return None

    def _account_block(self, target: str, p: int, clean, clean_gp, outcome,
                       site=Site.MEMORY_RESIDENCY, fault_target: str | None = None):
        mem, addr = self._mem(target), self.addr[target]
        data = mem.data(addr)
        gp = mem.guardpad[addr]
        fault_target = fault_target or target
        status = outcome.status.value if outcome is not None else "unchecked"
        for e in self._events(site, fault_target, p):
            r, c = e.index
            faulty = self._faulty_word(site, fault_target, p, clean, e.index)
            cons = faulty != int(clean[r, c])
            in_mask = bool((faulty ^ int(clean[r, c])) & mem.mask)
            det = outcome is not None and outcome.detected and outcome.flags(r, c)
            cor = det and int(data[r, c]) == int(clean[r, c])
            self._log(p, e, cons, in_mask, det, cor, status)
        if site is not Site.MEMORY_RESIDENCY:
            return
        now_gp = np.concatenate([gp["row"], gp["col"]])
        for e in self._events(Site.GUARDPAD_CELL, target, p):
            (k,) = e.index
            faulty = int(fi.apply(self.plan, Site.GUARDPAD_CELL, target, clean_gp, p)[k]) & ((1 << mem.width) - 1)
            cons = faulty != int(clean_gp[k])
            if outcome is None:
                det = False
            elif k < self.n:
                det = outcome.detected and k in outcome.row_deltas
            else:
                det = outcome.detected and (k - self.n) in outcome.col_deltas
            cor = det and int(now_gp[k]) == int(clean_gp[k])
            self._log(p, e, cons, True, det, cor, status)

    def _faulty_word(self, site, target, p, clean, index) -> int:
        """The word at ``index`` after only the plan's events at that location."""
        x = 0
        force_one = force_zero = 0
        for e in self.plan.flips(site, target, p):
            if tuple(e.index) == tuple(index):
                x ^= 1 << e.bit
        for e in self.plan.stuck(site, target):
            if tuple(e.index) == tuple(index):
                if e.value:
                    force_one |= 1 << e.bit
                else:
                    force_zero |= 1 << e.bit
        return ((int(clean[index]) ^ x) | force_one) & ~force_zero

    def _load(self, target: str, values, p: int, tile) -> None:
        mem = self._mem(target)
        bits = to_bits(values, mem.dtype)
        hook = fi.hook(self.plan, Site.MVIN_STREAM, target, p)
        mem.mvin(self.addr[target], bits, tile=tile, stream_fault=hook)
        if hook is not None:
            stored = mem.data(self.addr[target])
            for e in self._events(Site.MVIN_STREAM, target, p):
                r, c = e.index
                cons = int(stored[r, c]) != int(bits[r, c])
                self._log(p, e, cons, bool((int(stored[r, c]) ^ int(bits[r, c])) & mem.mask),
                          False, False, "absorbed")

    # -- array ------------------------------------------------------------------

    def _array_footprint(self, e, mode_ws: bool):
        n = self.n
        if isinstance(e, fi.StuckAt):
            pr, j = e.index
            cols = slice(j, n) if e.site is Site.ARRAY_INPUT else slice(j, j + 1)
            rows = slice(0, n) if mode_ws else slice(pr, pr + 1)
            return rows, cols
        i, _, j = e.index
        cols = slice(j, n) if e.site is Site.ARRAY_INPUT else slice(j, j + 1)
        return slice(i, i + 1), cols

    def _array_stage(self, p, a, b, d):
        n, dtype = self.n, self.dtype
        clean = gemm(a, b, d, self.geometry, dtype)
        masks = fi.array_faults(self.plan, p, n)
        c = gemm(a, b, d, self.geometry, dtype, masks) if masks is not None else clean.copy()
        faulty = c.copy()
        outcome = None
        if self.protection.array:
            if dtype.is_float:
                d64 = np.asarray(d, np.float64)
                dr, dc = d64.sum(axis=1), d64.sum(axis=0)
                absd = (np.abs(d64).sum(axis=1), np.abs(d64).sum(axis=0))
                checks = shield_checksums(a, b, dr, dc, dtype, absd)
            else:
                gp = self.accmem.guardpad[self.addr["acc"]]
                checks = shield_checksums(a, b, wrap_int32(gp["row"]), wrap_int32(gp["col"]), dtype)
            outcome = shield_verify(c, checks, self.geometry, dtype,
                                    latency=self.latency["array"])
            if outcome.status is ArrayStatus.TILE_FAULT:
                self.tile_faults += 1
                first = min(outcome.col_deltas) if outcome.col_deltas else -1
                self.accmem.linker.error_block.record(
                    self.addr["acc"], -1, "tile-" + "-".join(map(str, outcome.tile)),
                    outcome.col_deltas.get(first, 0))
        if masks is not None:
            ws = self.geometry.mode is Mode.WS
            status = outcome.status.value if outcome is not None else "unchecked"
            for site in (Site.ARRAY_INPUT, Site.PE_PARTIAL_SUM):
                for e in self._events(site, "array", p):
                    rows, cols = self._array_footprint(e, ws)
                    changed = ~_values_close(faulty[rows, cols], clean[rows, cols], dtype)
                    cons = bool(changed.any())
                    det = False
                    if outcome is not None and outcome.detected:
                        rr = range(n)[rows]
                        cc = range(n)[cols]
                        det = any(r in outcome.row_deltas for r in rr) or any(
                            col in outcome.col_deltas for col in cc)
                    cor = det and bool(_values_close(c[rows, cols], clean[rows, cols], dtype).all())
                    self._log(p, e, cons, True, det, cor, status)
        return c

    # -- pass ------------------------------------------------------------------

    def run(self) -> TrialResult:
        model, n = self.work.model, self.n
        x_all = self.work.inputs
        outputs = []
        schedule = iter(self.schedule)
        for b in range(x_all.shape[0] // n):
            x = x_all[b * n:(b + 1) * n]
            for li, layer in enumerate(model.layers):
                in_pad = -(-layer.weights.shape[0] // n) * n
                out_pad = -(-layer.weights.shape[1] // n) * n
                w = _pad_to(np.asarray(layer.weights), in_pad, out_pad)
                bias = np.zeros(out_pad, dtype=np.asarray(layer.bias).dtype)
                bias[: layer.bias.shape[0]] = layer.bias
                x = _pad_to(np.asarray(x), n, in_pad)
                written = self._write_registers(layer)
                acc_out = np.zeros((n, out_pad), dtype=np.float32 if self.dtype.is_float else np.int64)
                next_x = np.zeros((n, out_pad), dtype=x.dtype)
                for t in range(out_pad // n):
                    for q in range(in_pad // n):
                        info = next(schedule)
                        c, act = self._pass(info, written, x[:, q * n:(q + 1) * n],
                                            w[q * n:(q + 1) * n, t * n:(t + 1) * n],
                                            np.broadcast_to(bias[t * n:(t + 1) * n], (n, n)), layer)
                    acc_out[:, t * n:(t + 1) * n] = c
                    if act is not None:
                        next_x[:, t * n:(t + 1) * n] = act
                x = next_x
            outputs.append(acc_out)
        out = np.concatenate(outputs)[: self.work.samples]
        classes = model.classes
        preds = out[:, :classes].argmax(axis=1)
        return TrialResult(self.trial, self.plan.rate, self.protection.any, self.events, out, preds,
                           self.register_aborts, self.tile_faults,
                           [asdict(e) for e in self.accmem.mvout_error_block()
                            + self.spad.mvout_error_block()])

    def _pass(self, info: PassInfo, written, a_vals, b_vals, bias_tile, layer):
        p, n, dtype = info.index, self.n, self.dtype
        regs = self._read_registers(p, written)
        tile = (info.layer, info.col_tile, info.k_tile)
        self._load("A", a_vals, p, tile)
        self._load("B", b_vals, p, tile)
        if info.first_k:
            self._load("acc", bias_tile, p, tile)
        operands = {}
        for target in ("A", "B", "acc"):
            clean, clean_gp = self._expose_block(target, p)
            outcome = self._verify(target)
            self._account_block(target, p, clean, clean_gp, outcome)
            mem = self._mem(target)
            operands[target] = from_bits(mem.data(self.addr[target]), mem.dtype)
        a = operands["A"]
        if regs["stride"] != n:
            # a corrupted row stride fetches activation rows from the wrong offset
            a = np.roll(a, -((regs["stride"] - n) % n), axis=0)
        c = self._array_stage(p, a, operands["B"], operands["acc"])

        # writeback into the accumulator, verified when it is next read
        c_bits = to_bits(c, self.acc_type)
        hook = fi.hook(self.plan, Site.WRITEBACK, "C", p)
        self.accmem.writeback(self.addr["acc"], c_bits, tile=tile, path_fault=hook)
        outcome = self._verify("acc")
        if hook is not None:
            self._account_block("acc", p, c_bits, None, outcome, site=Site.WRITEBACK,
                                fault_target="C")
        c = from_bits(self.accmem.data(self.addr["acc"]), self.acc_type)

        act = None
        if info.last_k and info.activation:
            act = self._nonlinear(p, c, regs, layer)
        return c, act

    def _nonlinear(self, p, c, regs, layer):
        dtype = self.dtype
        shift = regs["scale_shift"]
        shift = shift - 256 if shift >= 128 else shift
        x = requantise(c, shift, dtype)
        if regs["act_mode"] != 1:
            # activation skipped: its output words never exist
            for k in range(3):
                for e in self._events(Site.NONLINEAR_OUTPUT, f"copy{k}", p):
                    self._log(p, e, False, True, False, False, "skipped")
            return x
        copies = self.protection.nonlinear_copies if self.protection.nonlinear else 1
        hooks = {k: fi.hook(self.plan, Site.NONLINEAR_OUTPUT, f"copy{k}", p) for k in range(copies)}
        hooks = {k: h for k, h in hooks.items() if h is not None}
        result = redundant_apply("relu", x, copies, dtype, hooks)
        if any(self.plan.touches(Site.NONLINEAR_OUTPUT, f"copy{k}", p) for k in range(3)):
            clean = redundant_apply("relu", x, 1, dtype).bits.astype(np.int64)
            for k in range(3):
                target = f"copy{k}"
                events = self._events(Site.NONLINEAR_OUTPUT, target, p)
                if not events:
                    continue
                faulty = fi.apply(self.plan, Site.NONLINEAR_OUTPUT, target, clean, p)
                for e in events:
                    r, col = e.index
                    cons = k < copies and int(faulty[r, col]) != int(clean[r, col])
                    det = copies > 1 and int(result.votes[r, col]) < copies
                    cor = det and int(result.bits[r, col]) == int(clean[r, col])
                    self._log(p, e, cons, True, det, cor,
                              "voted" if det else "unchecked" if copies == 1 else "pass")
        return result.output.astype(np.int64) if not dtype.is_float else result.output


def run_trial(config: CampaignConfig, plan: FaultPlan, protection: Protection | None = None,
              trial: int = 0) -> TrialResult:
    protection = config.protection if protection is None else protection
    return Engine(config, plan, protection, trial).run()


# --------------------------------------------------------------------------- campaign

def _summarise_events(events) -> dict:
    cons = [e for e in events if e.consequential]
    masked = [e for e in cons if e.in_mask]
    detected = [e for e in masked if e.detected]
    corrected = [e for e in detected if e.corrected]
    return {
        "injected": len(events),
        "consequential_raw": len(cons),
        "consequential": len(masked),
        "detected": len(detected),
        "corrected": len(corrected),
        "uncorrected_detected": len(detected) - len(corrected),
        "missed": len(masked) - len(detected),
        "detection_coverage": _ratio(len(detected), len(masked)),
        "correction_coverage": _ratio(len(corrected), len(detected)),
        "raw_detection_coverage": _ratio(sum(e.detected for e in cons), len(cons)),
    }


def _ratio(a: int, b: int):
    return round(a / b, 6) if b else None


def _trial_job(args):
    config, rate, rate_index, trial = args
    plan = build_plan(config, rate, trial, rate_index)
    prot = run_trial(config, plan, config.protection, trial)
    unprot = run_trial(config, plan, Protection.off(), trial)
    return prot, unprot


@dataclass
class CampaignReport:
    config: dict
    shield: dict
    timing: dict
    latency: dict
    baseline: dict
    rates: list
    trials: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"config": self.config, "shield": self.shield, "timing": self.timing,
                "latency": self.latency, "baseline": self.baseline, "rates": self.rates}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            fh.write(self.to_json() + "\n")
        with open(os.path.join(out_dir, "trials.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            cols = ["rate", "trial", "injected", "consequential", "detected", "corrected", "missed",
                    "register_aborts", "tile_faults", "accuracy_protected", "accuracy_unprotected"]
            writer.writerow(cols)
            for row in self.trials:
                writer.writerow([row[c] for c in cols])
        with open(os.path.join(out_dir, "events.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(EVENT_COLUMNS)
            writer.writerows(self.events)


EVENT_COLUMNS = ("rate", "trial", "pass", "site", "target", "index", "bit", "permanent",
                 "outcome", "status", "latency_cycles", "cycle")


def _event_row(rate, e: Event):
    return (rate, e.trial, e.pass_index, e.site, e.target, ":".join(map(str, e.index)), e.bit,
            int(e.permanent), e.outcome, e.status, e.latency_cycles, e.cycle)


def _accuracy(result: TrialResult, work: PreparedWorkload, clean: TrialResult, dtype) -> float:
    if work.labels is not None:
        return round(float((result.predictions == work.labels).mean()), 6)
    return round(float(_values_close(result.outputs, clean.outputs, dtype).mean()), 6)


def _latency_stats(events, frequency_hz) -> dict:
    out = {}
    for comp in ("register", "memory", "array", "nonlinear"):
        lat = [e.latency_cycles for e in events if e.detected and COMPONENT[Site(e.site)] == comp]
        out[comp] = {"events": len(lat),
                     "worst_cycles": max(lat) if lat else None,
                     "mean_cycles": round(float(np.mean(lat)), 3) if lat else None}
    return out


def run_campaign(config: CampaignConfig, keep_events: bool = True) -> CampaignReport:
    """Run every (rate, trial) pair and aggregate in trial order."""
    geometry, dtype = config.geometry, config.element_type
    shield = configure_shields(geometry)
    work = prepare_workload(config.workload, dtype, geometry.n)
    clean_plan = FaultPlan(config.seed, 0.0)
    clean = run_trial(config, clean_plan, Protection.off())
    clean_protected = run_trial(config, clean_plan, config.protection)
    groups = len(pass_schedule(work.model, work.inputs.shape[0], geometry.n))
    timing = pipeline_schedule(groups, shield)
    latency = component_latencies(shield)
    latency_doc = {k: {"cycles": v, "ns": round(v / config.frequency_hz * 1e9, 3)}
                   for k, v in latency.items()}
    baseline = {
        "accuracy": _accuracy(clean, work, clean, dtype),
        "protected_fault_free_identical": bool(np.array_equal(
            np.asarray(clean.outputs), np.asarray(clean_protected.outputs))),
        "groups_per_trial": groups,
    }
    jobs = [(config, float(rate), ri, t) for ri, rate in enumerate(config.faults.rates)
            for t in range(config.trials)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]

    rates, trial_rows, event_rows = [], [], []
    for ri, rate in enumerate(config.faults.rates):
        chunk = results[ri * config.trials:(ri + 1) * config.trials]
        events = [e for prot, _ in chunk for e in prot.events]
        summary = _summarise_events(events)
        acc_p = [_accuracy(p, work, clean, dtype) for p, _ in chunk]
        acc_u = [_accuracy(u, work, clean, dtype) for _, u in chunk]
        per_site = {}
        for site in sorted({e.site for e in events}):
            per_site[site] = _summarise_events([e for e in events if e.site == site])
        rates.append({
            "rate": float(rate),
            "trials": config.trials,
            **summary,
            "latency": _latency_stats(events, config.frequency_hz),
            "accuracy_protected": round(float(np.mean(acc_p)), 6),
            "accuracy_unprotected": round(float(np.mean(acc_u)), 6),
            "register_aborts": sum(p.register_aborts for p, _ in chunk),
            "tile_faults": sum(p.tile_faults for p, _ in chunk),
            "per_site": per_site,
        })
        for (prot, _), ap, au in zip(chunk, acc_p, acc_u):
            s = _summarise_events(prot.events)
            trial_rows.append({"rate": float(rate), "trial": prot.trial, "injected": s["injected"],
                               "consequential": s["consequential"], "detected": s["detected"],
                               "corrected": s["corrected"], "missed": s["missed"],
                               "register_aborts": prot.register_aborts,
                               "tile_faults": prot.tile_faults,
                               "accuracy_protected": ap, "accuracy_unprotected": au})
            if keep_events:
                event_rows.extend(_event_row(float(rate), e) for e in prot.events)
    return CampaignReport(config.to_dict(), shield.to_dict(), asdict(timing), latency_doc,
                          baseline, rates, trial_rows, event_rows)


# --------------------------------------------------------------------------- sensitivity

def bit_classes(dtype: DType) -> dict:
    """Bit positions per class: sign, exponent, mantissa and sign+exponent."""
    if dtype is DType.INT8:
        return {"sign": [7], "magnitude": list(range(7)), "all": list(range(8))}
    mant = 23 if dtype is DType.FP32 else 7
    sign = dtype.width - 1
    exponent = list(range(mant, sign))
    return {"sign": [sign], "exponent": exponent, "mantissa": list(range(mant)),
            "sign_exponent": exponent + [sign]}


@dataclass
class SensitivityTable:
    dtype: str
    baseline_accuracy: float
    rows: list

    def accuracy(self, bit_class: str, rate: float) -> float:
        for r in self.rows:
            if r["class"] == bit_class and r["rate"] == rate:
                return r["accuracy"]
        raise KeyError((bit_class, rate))

    def to_dict(self) -> dict:
        return asdict(self)


def _flip_values(values: np.ndarray, dtype: DType, plan, target, p, positions) -> np.ndarray:
    events = plan.flips(Site.MEMORY_RESIDENCY, target, p)
    if not events:
        return values
    bits = to_bits(values, dtype).astype(np.int64)
    for e in events:
        bits[e.index] ^= 1 << positions[e.bit]
    return from_bits(bits.astype(dtype.storage), dtype)


def _sensitivity_run(model: Model, x, labels, dtype, positions, rate, seed, run, batch):
    layers = [(np.array(l.weights, dtype=np.float32), np.asarray(l.bias, np.float64)) for l in model.layers]
    batches = x.shape[0] // batch
    sites, bits = [], []
    for _ in range(batches):
        for li, (w, _) in enumerate(layers):
            rows_in = w.shape[0]
            sites.append([SiteSpec(Site.MEMORY_RESIDENCY, f"x{li}", (batch, rows_in), len(positions)),
                          SiteSpec(Site.MEMORY_RESIDENCY, f"w{li}", w.shape, len(positions))])
            bits.append((batch * rows_in + w.size) * dtype.width)
    plan = fi.plan_transient(rate, bits, sites, seed, len(sites), (run,)) \
        if rate > 0 else FaultPlan(seed, 0.0)
    correct, p = 0, 0
    with np.errstate(all="ignore"):
        for b in range(batches):
            h = x[b * batch:(b + 1) * batch].astype(np.float32)
            for li in range(len(layers)):
                w, bias = layers[li]
                h = _flip_values(h, dtype, plan, f"x{li}", p, positions)
                # weights stay resident, so their corruption persists across batches
                layers[li] = (_flip_values(w, dtype, plan, f"w{li}", p, positions), bias)
                z = h.astype(np.float64) @ layers[li][0].astype(np.float64) + bias
                h = from_bits(to_bits(np.maximum(z, 0) if li < len(layers) - 1 else z, dtype), dtype)
                p += 1
            logits = h.astype(np.float64)[:, : model.classes]
            logits = np.where(np.isnan(logits), -np.inf, logits)
            correct += int((logits.argmax(axis=1) == labels[b * batch:(b + 1) * batch]).sum())
    return correct / (batches * batch)


def sensitivity_sweep(dtype: DType = DType.FP32, classes=None, rates=(0.0, 1e-6, 1e-5, 1e-4),
                      runs: int = 10, seed: int = 0, samples: int = 512, batch: int = 16,
                      dims=(64, 32, 10)) -> SensitivityTable:
    """Accuracy of the tiny classifier under flips restricted to one bit class.

    Flip counts per pass follow the same rate definition as campaigns (per
    bit of the pass's operands); each flip lands on a uniformly chosen word
    and a uniformly chosen position of the class.  Accuracy is in percent,
    averaged over ``runs`` seeded runs.
    """
    model, data = tiny_mlp(dtype, dims, seed=0, n_test=samples)
    x = model.quantise_input(data.x_test[:samples])
    labels = data.y_test[:samples]
    samples = (samples // batch) * batch
    x, labels = x[:samples], labels[:samples]
    table = bit_classes(dtype)
    classes = list(classes or table)
    unknown = [c for c in classes if c not in table]
    if unknown:
        raise ConfigurationError(f"unknown bit classes {unknown} for {dtype.label}")
    baseline = 100.0 * _sensitivity_run(model, x, labels, dtype, [0], 0.0, seed, 0, batch)
    rows = []
    for ci, cls in enumerate(classes):
        positions = table[cls]
        for rate in rates:
            accs = [100.0 * _sensitivity_run(model, x, labels, dtype, positions, float(rate),
                                             seed + 1000 * ci, run, batch) for run in range(runs)]
            rows.append({"class": cls, "rate": float(rate), "accuracy": round(float(np.mean(accs)), 4),
                         "drop": round(baseline - float(np.mean(accs)), 4),
                         "runs": [round(a, 4) for a in accs]})
    return SensitivityTable(dtype.label, round(baseline, 4), rows)


def replay(config: CampaignConfig, plan: FaultPlan) -> tuple[TrialResult, TrialResult]:
    """Re-run a serialised plan with protection on and off."""
    return (run_trial(config, plan, config.protection, 0),
            run_trial(config, plan, Protection.off(), 0))


__all__ = [
    "CampaignConfig", "CampaignReport", "Engine", "FaultSpec", "Protection", "SensitivityTable",
    "TrialResult", "WorkloadSpec", "build_plan", "replay", "run_campaign", "run_trial",
    "sensitivity_sweep",
]
