"""Seeded transient and permanent fault plans bound to exposure sites.

A plan is an immutable list of events.  A transient flip hits one bit of one
word during one exposure pass; a stuck-at fault forces one bit of every value
crossing its location for the whole trial.  Applying a plan XORs the
transient flips first and then forces stuck bits, so a permanent fault
dominates a transient one on the same bit.

Randomness comes from numpy's counter-based Philox generator keyed by
``SeedSequence((seed, trial))``; each trial owns an independent substream.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError


class Site(Enum):
    MVIN_STREAM = "MvinStream"
    MEMORY_RESIDENCY = "MemoryResidency"
    ARRAY_INPUT = "ArrayInput"
    PE_PARTIAL_SUM = "PEPartialSum"
    WRITEBACK = "Writeback"
    GUARDPAD_CELL = "GuardpadCell"
    REGISTER_BIT = "RegisterBit"
    NONLINEAR_OUTPUT = "NonlinearOutput"


@dataclass(frozen=True)
class SiteSpec:
    """One exposure surface: ``shape`` words of ``width`` bits named ``target``.

    ``weight`` scales the share of flips the surface receives relative to its
    bit count (1.0 means proportional to bits).
    """

    site: Site
    target: str
    shape: tuple
    width: int
    weight: float = 1.0

    @property
    def words(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def bits(self) -> int:
        return self.words * self.width

    def validate(self, index: tuple, bit: int) -> None:
        if len(index) != len(self.shape) or any(
                not 0 <= i < s for i, s in zip(index, self.shape)):
            raise ConfigurationError(f"index {index} outside {self.target} of shape {self.shape}")
        if not 0 <= bit < self.width:
            raise ConfigurationError(f"bit {bit} outside {self.width}-bit {self.target}")


@dataclass(frozen=True)
class TransientFlip:
    site: Site
    target: str
    pass_index: int
    index: tuple
    bit: int


@dataclass(frozen=True)
class StuckAt:
    site: Site
    target: str
    index: tuple
    bit: int
    value: int


def _event_dict(e) -> dict:
    d = asdict(e)
    d["site"] = e.site.value
    d["index"] = list(e.index)
    return d


@dataclass(frozen=True)
class FaultPlan:
    seed: int | None = None
    rate: float = 0.0
    transient: tuple = ()
    permanent: tuple = ()
    trial: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transient", tuple(self.transient))
        object.__setattr__(self, "permanent", tuple(self.permanent))
        by_key: dict = {}
        for e in self.transient:
            by_key.setdefault((e.site, e.target, e.pass_index), []).append(e)
        stuck: dict = {}
        for e in self.permanent:
            stuck.setdefault((e.site, e.target), []).append(e)
        object.__setattr__(self, "_by_key", by_key)
        object.__setattr__(self, "_stuck", stuck)

    def __len__(self) -> int:
        return len(self.transient) + len(self.permanent)

    def merge(self, other: "FaultPlan") -> "FaultPlan":
        return FaultPlan(self.seed, self.rate, self.transient + other.transient,
                         self.permanent + other.permanent, self.trial)

    # -- queries ------------------------------------------------------------

    def flips(self, site: Site, target: str, pass_index: int) -> list[TransientFlip]:
        return self._by_key.get((site, target, pass_index), [])

    def stuck(self, site: Site, target: str) -> list[StuckAt]:
        return self._stuck.get((site, target), [])

    def touches(self, site: Site, target: str, pass_index: int) -> bool:
        return bool(self.flips(site, target, pass_index) or self.stuck(site, target))

    def xor_mask(self, site: Site, target: str, pass_index: int, shape) -> np.ndarray:
        mask = np.zeros(shape, np.int64)
        for e in self.flips(site, target, pass_index):
            mask[e.index] ^= 1 << e.bit
        return mask

    def stuck_masks(self, site: Site, target: str, shape) -> tuple[np.ndarray, np.ndarray]:
        force_one, force_zero = np.zeros(shape, np.int64), np.zeros(shape, np.int64)
        for e in self.stuck(site, target):
            if e.value:
                force_one[e.index] |= 1 << e.bit
            else:
                force_zero[e.index] |= 1 << e.bit
        return force_one, force_zero

    # -- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        return {"seed": self.seed, "rate": self.rate, "trial": self.trial,
                "transient": [_event_dict(e) for e in self.transient],
                "permanent": [_event_dict(e) for e in self.permanent]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FaultPlan":
        def conv(e, kind):
            e = dict(e)
            e["site"], e["index"] = Site(e["site"]), tuple(e["index"])
            return kind(**e)

        return cls(d.get("seed"), d.get("rate", 0.0),
                   tuple(conv(e, TransientFlip) for e in d.get("transient", ())),
                   tuple(conv(e, StuckAt) for e in d.get("permanent", ())),
                   d.get("trial", 0))

    @classmethod
    def from_json(cls, text: str) -> "FaultPlan":
        return cls.from_dict(json.loads(text))


EMPTY_PLAN = FaultPlan()


def trial_rng(seed: int, trial=0) -> np.random.Generator:
    """Philox stream for ``(seed, trial)``; ``trial`` may be a tuple of keys."""
    keys = tuple(trial) if isinstance(trial, (tuple, list)) else (trial,)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *keys))))


def _shares(sites) -> np.ndarray:
    share = np.array([s.weight * s.bits for s in sites], dtype=np.float64)
    if share.sum() <= 0:
        raise ConfigurationError("exposure sites carry no bits")
    return share / share.sum()


def plan_transient(rate: float, input_bits, sites, seed: int, passes: int = 1,
                   trial=0) -> FaultPlan:
    """Draw Binomial(input_bits, rate) flips per pass and place them over ``sites``.

    A site's share of flips is proportional to ``weight * bits``; within a
    site the word and bit are uniform.  ``sites`` is either one list used
    for every pass or a per-pass sequence of lists; ``input_bits`` likewise
    may be a per-pass sequence.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"rate {rate} outside [0, 1]")
    sites = list(sites)
    per_pass = bool(sites) and isinstance(sites[0], (list, tuple))
    if per_pass and len(sites) != passes:
        raise ConfigurationError("per-pass site lists must match the pass count")
    if rate > 0 and (not sites or (per_pass and not all(sites))):
        raise ConfigurationError("positive fault rate with no exposure sites")
    bits = np.broadcast_to(np.asarray(input_bits, dtype=np.int64), (passes,))
    rng = trial_rng(seed, trial)
    counts = rng.binomial(bits, rate) if rate > 0 else np.zeros(passes, int)
    events = []
    if counts.any():
        shared = None if per_pass else _shares(sites)
        for p, count in enumerate(counts):
            if not count:
                continue
            pass_sites = sites[p] if per_pass else sites
            share = _shares(pass_sites) if per_pass else shared
            for which in rng.choice(len(pass_sites), size=int(count), p=share):
                spec = pass_sites[which]
                flat = int(rng.integers(spec.bits))
                word, bit = divmod(flat, spec.width)
                index = tuple(int(i) for i in np.unravel_index(word, spec.shape)) if spec.shape else ()
                events.append(TransientFlip(spec.site, spec.target, p, index, bit))
    trial_key = list(trial) if isinstance(trial, (tuple, list)) else trial
    return FaultPlan(seed, rate, tuple(events), (), trial_key)


def plan_permanent(spec: SiteSpec, index, bit: int, value: int, seed: int | None = None) -> FaultPlan:
    index = tuple(index)
    spec.validate(index, bit)
    if value not in (0, 1):
        raise ConfigurationError("stuck value must be 0 or 1")
    return FaultPlan(seed, 0.0, (), (StuckAt(spec.site, spec.target, index, bit, value),))


def apply(plan: FaultPlan, site: Site, target: str, bits, pass_index: int = 0):
    """Corrupt an array of raw patterns (or a single int) crossing ``site``."""
    scalar = np.ndim(bits) == 0
    arr = np.array(bits, dtype=np.int64, ndmin=1 if scalar else 0)
    if plan.touches(site, target, pass_index):
        shape = () if scalar else arr.shape
        x = plan.xor_mask(site, target, pass_index, shape)
        force_one, force_zero = plan.stuck_masks(site, target, shape)
        arr = ((arr ^ x) | force_one) & ~force_zero
    if scalar:
        return int(arr.reshape(-1)[0])
    return arr.astype(np.asarray(bits).dtype)


def apply_word(plan: FaultPlan, site: Site, target: str, word, pass_index: int = 0):
    from .numerics import Word

    return Word(apply(plan, site, target, word.bits, pass_index), word.dtype)


def hook(plan: FaultPlan, site: Site, target: str, pass_index: int):
    """A bits -> bits callable for APIs that take fault hooks, or None when idle."""
    if not plan.touches(site, target, pass_index):
        return None
    return lambda bits: apply(plan, site, target, bits, pass_index)


def array_faults(plan: FaultPlan, pass_index: int, n: int, target: str = "array"):
    """Per-PE masks for the gemm kernels, or None when the array is untouched.

    Transient events index ``(i, k, j)``; stuck-at events index the PE.
    """
    from .systolic import ArrayFaults

    if not (plan.touches(Site.ARRAY_INPUT, target, pass_index)
            or plan.touches(Site.PE_PARTIAL_SUM, target, pass_index)):
        return None
    f = ArrayFaults.empty(n)
    f.act_xor = plan.xor_mask(Site.ARRAY_INPUT, target, pass_index, (n, n, n))
    f.act_or, f.act_andn = plan.stuck_masks(Site.ARRAY_INPUT, target, (n, n))
    f.psum_xor = plan.xor_mask(Site.PE_PARTIAL_SUM, target, pass_index, (n, n, n))
    f.psum_or, f.psum_andn = plan.stuck_masks(Site.PE_PARTIAL_SUM, target, (n, n))
    return f


@dataclass
class SiteCatalog:
    """The exposure surfaces of one pass, keyed by (site, target)."""

    specs: list = field(default_factory=list)

    def add(self, spec: SiteSpec) -> None:
        self.specs.append(spec)

    def select(self, sites) -> list[SiteSpec]:
        wanted = {Site(s) if not isinstance(s, Site) else s for s in sites}
        return [s for s in self.specs if s.site in wanted]

    def get(self, site: Site, target: str) -> SiteSpec:
        for s in self.specs:
            if s.site is site and s.target == target:
                return s
        raise KeyError(f"no exposure surface {site.value}/{target}")
