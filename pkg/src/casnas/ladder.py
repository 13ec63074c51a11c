"""Complexity-aware sampling: FLOPs-level ladder, adjacent-step moves and HSS mins."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .flops import mflops
from .space import SpaceSpec, SubnetConfig, max_subnet, min_subnet, sample_uniform

DEFAULT_LEVELS = (100.0, 200.0, 300.0, 400.0, 500.0, 700.0, 900.0, 1200.0)
DEFAULT_HSS_TARGETS = (37.0, 160.0, 280.0)
DEFAULT_BAND = 0.10
DEFAULT_MAX_ATTEMPTS = 200


class LadderError(ValueError):
    pass


class SamplingExhausted(RuntimeError):
    """No candidate landed in the requested FLOPs band within the attempt budget."""


@dataclass(frozen=True)
class ComplexityLadder:
    levels: tuple[float, ...] = DEFAULT_LEVELS
    band: float = DEFAULT_BAND

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(c) for c in self.levels))
        if len(self.levels) < 2:
            raise LadderError("a ladder needs at least two levels")
        if any(c <= 0 for c in self.levels):
            raise LadderError("ladder levels must be positive")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise LadderError("ladder levels must be strictly increasing")
        if not 0 < self.band < 0.5:
            raise LadderError("band must lie in (0, 0.5)")
        for a, b in zip(self.levels, self.levels[1:]):
            if a * (1 + self.band) >= b * (1 - self.band):
                raise LadderError(f"bands of levels {a} and {b} overlap")

    def __len__(self) -> int:
        return len(self.levels)

    def bounds(self, j: int) -> tuple[float, float]:
        c = self.levels[j]
        return c * (1 - self.band), c * (1 + self.band)


@dataclass
class LadderState:
    current_level_index: int = 0
    step_count: int = 0


def next_level(state: LadderState, ladder: ComplexityLadder, rng: np.random.Generator) -> int:
    """Move at most one level up or down, uniformly over the in-range options.

    Updates ``state`` in place and returns the new level index.
    """
    i = state.current_level_index
    if not 0 <= i < len(ladder):
        raise LadderError(f"level index {i} outside ladder of size {len(ladder)}")
    options = [j for j in (i - 1, i, i + 1) if 0 <= j < len(ladder)]
    j = options[int(rng.integers(len(options)))]
    state.current_level_index = j
    state.step_count += 1
    return j


@dataclass
class BandSample:
    config: SubnetConfig
    mflops: float
    attempts: int
    fallback: bool


def sample_in_band(
    space: SpaceSpec,
    lo: float,
    hi: float,
    rng: np.random.Generator,
    max_attempts: int = DEFAULT_MAX_ATTEMPTS,
    sampler: Callable[[SpaceSpec, np.random.Generator], SubnetConfig] = sample_uniform,
    exclude: Sequence[SubnetConfig] = (),
    strict: bool = False,
) -> BandSample:
    """Rejection-sample a subnet whose MFLOPs lie in ``[lo, hi]``.

    On exhaustion returns the candidate closest to the band centre (``fallback``
    set), or raises :class:`SamplingExhausted` when ``strict``.
    """
    target = 0.5 * (lo + hi)
    nearest, nearest_f, nearest_gap = None, 0.0, np.inf
    for attempt in range(1, max_attempts + 1):
        cfg = sampler(space, rng)
        if cfg in exclude:
            continue
        f = mflops(space, cfg)
        if lo <= f <= hi:
            return BandSample(cfg, f, attempt, False)
        gap = abs(f - target)
        if gap < nearest_gap:
            nearest, nearest_f, nearest_gap = cfg, f, gap
    if strict or nearest is None:
        raise SamplingExhausted(f"no subnet within [{lo:.1f}, {hi:.1f}] MFLOPs after {max_attempts} draws")
    return BandSample(nearest, nearest_f, max_attempts, True)


def sample_at_level(space: SpaceSpec, ladder: ComplexityLadder, j: int, rng: np.random.Generator,
                    max_attempts: int = DEFAULT_MAX_ATTEMPTS, sampler=sample_uniform) -> BandSample:
    """Sample a subnet inside level ``j``'s band; never returns the biggest subnet."""
    lo, hi = ladder.bounds(j)
    return sample_in_band(space, lo, hi, rng, max_attempts, sampler, exclude=(max_subnet(space),))


@dataclass(frozen=True)
class HssSet:
    subnets: tuple[SubnetConfig, ...]
    flops: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if not self.subnets:
            raise LadderError("HSS set needs at least one subnet")
        if len(self.flops) != len(self.subnets):
            raise LadderError("HSS flops cache does not match its subnets")
        if any(b <= a for a, b in zip(self.flops, self.flops[1:])):
            raise LadderError("HSS FLOPs must be strictly increasing")

    def __len__(self) -> int:
        return len(self.subnets)

    @classmethod
    def from_subnets(cls, space: SpaceSpec, subnets: Sequence[SubnetConfig]) -> "HssSet":
        subnets = tuple(subnets)
        if subnets and subnets[0] != min_subnet(space):
            raise LadderError("the first HSS member must be the smallest subnet of the space")
        return cls(subnets, tuple(mflops(space, s) for s in subnets))


def nearest_min_index(hss: HssSet, level_mflops: float) -> int:
    """Index of the smallest HSS member strictly above ``level_mflops``.

    Falls back to the largest member when none is larger.
    """
    for n, f in enumerate(hss.flops):
        if f > level_mflops:
            return n
    return len(hss) - 1


def nearest_min(hss: HssSet, level_mflops: float) -> SubnetConfig:
    return hss.subnets[nearest_min_index(hss, level_mflops)]


def build_hss(space: SpaceSpec, targets: Sequence[float], rng: np.random.Generator,
              band: float = DEFAULT_BAND, max_attempts: int = 20000) -> HssSet:
    """Freeze the hierarchical smallest subnets for a run.

    Member 0 is the space minimum (its FLOPs must fall in the first target's
    band); every later member is rejection-sampled into its target's band.
    """
    targets = [float(t) for t in targets]
    if not targets:
        raise LadderError("HSS needs at least one target")
    if any(b <= a for a, b in zip(targets, targets[1:])):
        raise LadderError("HSS targets must be strictly increasing")
    smallest = min_subnet(space)
    f0 = mflops(space, smallest)
    if not targets[0] * (1 - band) <= f0 <= targets[0] * (1 + band):
        raise LadderError(f"first HSS target {targets[0]} does not admit the minimum subnet ({f0:.2f} MFLOPs)")
    members = [smallest]
    for t in targets[1:]:
        s = sample_in_band(space, t * (1 - band), t * (1 + band), rng, max_attempts,
                           exclude=tuple(members), strict=True)
        members.append(s.config)
    return HssSet.from_subnets(space, members)
