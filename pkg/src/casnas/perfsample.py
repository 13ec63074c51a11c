"""Performance-aware sampling.

Per-level memory banks of low-loss subnets, the exploit/explore mixture driven by
``q``, and the anchor-based preference for wide-and-shallow transformer stages.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .flops import mflops
from .ladder import DEFAULT_MAX_ATTEMPTS, BandSample, ComplexityLadder, sample_at_level
from .space import (SpaceSpec, StageConfig, SubnetConfig, encode, format_genome, parse_genome,
                    transformer_stage_indices)

DEFAULT_CAPACITY = 8
DEFAULT_Q0 = 0.2
DEFAULT_Q_MAX = 0.8
DEFAULT_MAX_PREF_ATTEMPTS = 10


@dataclass
class BankEntry:
    config: SubnetConfig
    loss: float
    step_seen: int


@dataclass
class MemoryBank:
    """Bounded per-level store of the best subnets seen so far, by mini-batch loss."""

    num_levels: int
    capacity: int = DEFAULT_CAPACITY
    levels: list[list[BankEntry]] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("bank capacity must be >= 1")
        if not self.levels:
            self.levels = [[] for _ in range(self.num_levels)]

    def __getitem__(self, j: int) -> list[BankEntry]:
        return self.levels[j]

    def anchor(self, j: int) -> "AnchorChoice":
        entries = self.levels[j]
        if not entries:
            return AnchorChoice(None, AnchorSource.NONE)
        best = min(entries, key=lambda e: e.loss)
        return AnchorChoice(best.config, AnchorSource.BANK_MIN_LOSS)

    def to_json(self, space: SpaceSpec) -> dict:
        return {
            "capacity": self.capacity,
            "levels": [
                [{"subnet": format_genome(space, e.config), "loss": e.loss, "step_seen": e.step_seen}
                 for e in entries]
                for entries in self.levels
            ],
        }

    @classmethod
    def from_json(cls, space: SpaceSpec, data: dict) -> "MemoryBank":
        levels = [
            [BankEntry(parse_genome(space, e["subnet"]), float(e["loss"]), int(e["step_seen"]))
             for e in entries]
            for entries in data["levels"]
        ]
        return cls(len(levels), int(data["capacity"]), levels)


def bank_update(space: SpaceSpec, bank: MemoryBank, j: int, cfg: SubnetConfig, loss: float,
                step: int) -> bool:
    """Insert ``cfg`` into level ``j`` using worst-performing replacement.

    A config already in the level only has its loss (and step) refreshed.
    Returns whether the bank changed.
    """
    if not math.isfinite(loss):
        raise ValueError(f"bank losses must be finite, got {loss}")
    entries = bank.levels[j]
    key = encode(space, cfg)
    for e in entries:
        if encode(space, e.config) == key:
            e.loss = loss
            e.step_seen = step
            return True
    if len(entries) < bank.capacity:
        entries.append(BankEntry(cfg, loss, step))
        return True
    worst = max(range(len(entries)), key=lambda i: entries[i].loss)
    if loss < entries[worst].loss:
        entries[worst] = BankEntry(cfg, loss, step)
        return True
    return False


@dataclass(frozen=True)
class QSchedule:
    q0: float = DEFAULT_Q0
    q_max: float = DEFAULT_Q_MAX
    ramp: str = "linear"

    def __post_init__(self):
        if not 0 <= self.q0 <= self.q_max <= 1:
            raise ValueError("need 0 <= q0 <= q_max <= 1")
        if self.ramp not in ("linear", "constant"):
            raise ValueError(f"unknown q ramp {self.ramp!r}")


def q_at(schedule: QSchedule, step: int, total_steps: int) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if schedule.ramp == "constant" or total_steps == 0:
        return schedule.q0
    return schedule.q0 + (schedule.q_max - schedule.q0) * (step / total_steps)


class AnchorSource(str, enum.Enum):
    BANK_MIN_LOSS = "BankMinLoss"
    NONE = "None"


@dataclass(frozen=True)
class AnchorChoice:
    anchor: SubnetConfig | None
    source: AnchorSource


def _resize_layers(values: tuple[int, ...], depth: int) -> tuple[int, ...]:
    if depth <= len(values):
        return values[:depth]
    return values + (values[-1],) * (depth - len(values))


def depth_swapped(space: SpaceSpec, anchor: SubnetConfig, cand: SubnetConfig) -> SubnetConfig:
    """Anchor with the candidate's transformer-stage depths.

    Per-layer choices stay the anchor's; layers beyond the anchor's depth repeat
    its last layer.
    """
    stages = list(anchor.stages)
    for i in transformer_stage_indices(space):
        a, d = anchor.stages[i], cand.stages[i].depth
        stages[i] = StageConfig(d, a.channels, _resize_layers(a.kernels, d), _resize_layers(a.expansions, d))
    return SubnetConfig(tuple(stages), anchor.resolution)


def width_swapped(space: SpaceSpec, anchor: SubnetConfig, cand: SubnetConfig) -> SubnetConfig:
    """Anchor with the candidate's transformer-stage widths."""
    stages = list(anchor.stages)
    for i in transformer_stage_indices(space):
        a = anchor.stages[i]
        stages[i] = StageConfig(a.depth, cand.stages[i].channels, a.kernels, a.expansions)
    return SubnetConfig(tuple(stages), anchor.resolution)


@dataclass(frozen=True)
class PreferenceResult:
    accept: bool
    phi_a: float
    phi_b: float


def preference_check(space: SpaceSpec, anchor: SubnetConfig, cand: SubnetConfig) -> PreferenceResult:
    """Accept candidates whose width change costs at least as much as their depth change.

    ``phi_a`` is the FLOPs gained by giving the anchor the candidate's
    transformer widths, ``phi_b`` the gain from its transformer depths. A
    candidate that is wider and shallower than the anchor gets ``phi_a >= phi_b``.
    """
    base = mflops(space, anchor)
    phi_a = mflops(space, width_swapped(space, anchor, cand)) - base
    phi_b = mflops(space, depth_swapped(space, anchor, cand)) - base
    return PreferenceResult(phi_a >= phi_b, phi_a, phi_b)


@dataclass
class PreferenceSample:
    config: SubnetConfig
    mflops: float
    rejections: int
    exhausted: bool
    band_fallbacks: int


def preference_filtered_sample(space: SpaceSpec, ladder: ComplexityLadder, j: int,
                               anchor: SubnetConfig | None, rng: np.random.Generator,
                               max_pref_attempts: int = DEFAULT_MAX_PREF_ATTEMPTS,
                               max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> PreferenceSample:
    """Level-``j`` sample, resampled until it passes the preference rule.

    Without an anchor the first draw is returned. After ``max_pref_attempts``
    rejected draws the last one is accepted and ``exhausted`` is set.
    """
    rejections = fallbacks = 0
    for attempt in range(max_pref_attempts):
        draw: BandSample = sample_at_level(space, ladder, j, rng, max_attempts)
        fallbacks += draw.fallback
        if anchor is None or preference_check(space, anchor, draw.config).accept:
            return PreferenceSample(draw.config, draw.mflops, rejections, False, fallbacks)
        rejections += 1
    return PreferenceSample(draw.config, draw.mflops, rejections, True, fallbacks)


class Provenance(str, enum.Enum):
    FROM_BANK = "FromBank"
    EXPLORED = "Explored"


@dataclass
class MixtureSample:
    config: SubnetConfig
    mflops: float
    tag: Provenance
    rejections: int = 0
    exhausted: bool = False
    band_fallbacks: int = 0


def sample_mixture(space: SpaceSpec, ladder: ComplexityLadder, j: int, bank: MemoryBank, q: float,
                   rng: np.random.Generator, anchor: AnchorChoice | None = None,
                   max_pref_attempts: int = DEFAULT_MAX_PREF_ATTEMPTS,
                   max_attempts: int = DEFAULT_MAX_ATTEMPTS) -> MixtureSample:
    """Exploit bank level ``j`` with probability ``q``, otherwise explore.

    Exploration is preference-filtered around ``anchor`` (defaults to the
    minimum-loss entry of level ``j``). An empty level always explores.
    """
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    entries = bank.levels[j]
    if entries and rng.random() < q:
        e = entries[int(rng.integers(len(entries)))]
        return MixtureSample(e.config, mflops(space, e.config), Provenance.FROM_BANK)
    if anchor is None:
        anchor = bank.anchor(j)
    s = preference_filtered_sample(space, ladder, j, anchor.anchor, rng, max_pref_attempts, max_attempts)
    return MixtureSample(s.config, s.mflops, Provenance.EXPLORED, s.rejections, s.exhausted,
                         s.band_fallbacks)
