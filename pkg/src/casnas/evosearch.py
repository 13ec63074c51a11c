"""Latency-constrained evolutionary search over a trained supernet.

Latency comes from a per-block-kind linear table (:class:`DeviceProfile`); any
callable ``(space, cfg) -> ms`` can stand in for it. Fitness is top-1 accuracy
on fixed held-out batches, tie-broken by lower loss and then lower FLOPs.

Only unique configurations are evaluated and every evaluation counts against
the budget. Candidates are checked against the constraint before they are
evaluated, so nothing infeasible is ever scored or reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .flops import layer_costs, mflops
from .micronet import Batch, SupernetWeights
from .space import (BlockKind, SpaceSpec, SubnetConfig, check_config, crossover, encode, format_genome,
                    min_subnet, mutate, sample_uniform)
from .trainer import evaluate

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

PROFILE_DIR = Path(__file__).parent / "profiles"
LATENCY = "latency_ms"
MFLOPS = "mflops"


class ProfileError(ValueError):
    pass


class InfeasibleConstraint(ValueError):
    """The smallest subnet already violates the constraint."""


@dataclass(frozen=True)
class DeviceProfile:
    """Linear latency table.

    Attributes:
        name: Profile label.
        coefficients: ms per MFLOP, keyed by block kind name.
        overheads: Fixed ms per layer, keyed by block kind name (missing kinds cost 0).
        resolution_multipliers: Optional per-input-resolution scale; absent resolutions use 1.
    """

    name: str
    coefficients: dict[str, float]
    overheads: dict[str, float] = field(default_factory=dict)
    resolution_multipliers: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.coefficients:
            raise ProfileError("profile must cover at least one block kind")
        kinds = {k.value for k in BlockKind}
        for table in (self.coefficients, self.overheads):
            for kind, value in table.items():
                if kind not in kinds:
                    raise ProfileError(f"unknown block kind {kind!r} in profile {self.name!r}")
                if not value >= 0:
                    raise ProfileError(f"latency entries must be >= 0 (got {kind}={value})")
        for res, value in self.resolution_multipliers.items():
            if not value > 0:
                raise ProfileError(f"resolution multiplier for {res} must be > 0")

    def scaled(self, factor: float) -> "DeviceProfile":
        """Same profile with every coefficient and overhead multiplied by ``factor``."""
        return DeviceProfile(f"{self.name}x{factor:g}", {k: v * factor for k, v in self.coefficients.items()},
                             {k: v * factor for k, v in self.overheads.items()},
                             dict(self.resolution_multipliers))

    def to_dict(self) -> dict:
        return {"name": self.name, "coefficients": dict(self.coefficients), "overheads": dict(self.overheads),
                "resolution_multipliers": {str(k): v for k, v in self.resolution_multipliers.items()}}


def profile_from_dict(data: dict) -> DeviceProfile:
    try:
        mult = {int(k): float(v) for k, v in data.get("resolution_multipliers", {}).items()}
        return DeviceProfile(str(data["name"]), {k: float(v) for k, v in data["coefficients"].items()},
                             {k: float(v) for k, v in data.get("overheads", {}).items()}, mult)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ProfileError):
            raise
        raise ProfileError(f"malformed device profile: {exc}") from exc


def load_profile(path_or_name: str | Path) -> DeviceProfile:
    """Load a TOML device profile; bare names resolve to the bundled profiles."""
    path = Path(path_or_name)
    if not path.is_file():
        bundled = PROFILE_DIR / f"{path_or_name}.toml"
        if bundled.is_file():
            path = bundled
        else:
            raise ProfileError(f"device profile {path_or_name} not found")
    try:
        data = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ProfileError(f"cannot parse {path}: {exc}") from exc
    return profile_from_dict(data)


def predict_latency(profile: DeviceProfile, space: SpaceSpec, cfg: SubnetConfig) -> float:
    """Sum of ``coefficient * layer MFLOPs + overhead`` over layers, times the resolution multiplier."""
    check_config(space, cfg)
    total = []
    for lc in layer_costs(space, cfg):
        kind = lc.kind.value
        if kind not in profile.coefficients:
            raise ProfileError(f"profile {profile.name!r} has no coefficient for block kind {kind}")
        total.append(profile.coefficients[kind] * lc.flops / 1e6 + profile.overheads.get(kind, 0.0))
    return math.fsum(total) * profile.resolution_multipliers.get(cfg.resolution, 1.0)


# --------------------------------------------------------------------------- #
# Search
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SearchConfig:
    """Evolution settings. Exactly one of ``latency_ms`` / ``mflops`` sets the constraint."""

    latency_ms: float | None = None
    mflops: float | None = None
    population: int = 64
    generations: int | None = None  # None: run until the budget or the space is exhausted
    mutation_rate: float = 0.1
    mutate_fraction: float = 0.5  # share of children made by mutation; the rest by crossover
    parent_fraction: float = 0.25
    budget: int = 5000
    seed: int = 0
    max_attempts: int = 50  # rejection tries per wanted candidate

    def __post_init__(self):
        if (self.latency_ms is None) == (self.mflops is None):
            raise ValueError("set exactly one of latency_ms or mflops")
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.budget < self.population:
            raise ValueError("budget must be >= population")
        for name in ("mutation_rate", "parent_fraction", "mutate_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if self.generations is not None and self.generations < 1:
            raise ValueError("generations must be >= 1")

    @property
    def constraint(self) -> tuple[str, float]:
        return (LATENCY, self.latency_ms) if self.latency_ms is not None else (MFLOPS, self.mflops)


@dataclass(frozen=True)
class Candidate:
    config: SubnetConfig
    genome: str
    accuracy: float
    loss: float
    latency_ms: float
    mflops: float

    @property
    def fitness(self) -> tuple[float, float, float]:
        return (self.accuracy, -self.loss, -self.mflops)

    def to_json(self) -> dict:
        lat = None if math.isnan(self.latency_ms) else self.latency_ms
        return {"genome": self.genome, "accuracy": self.accuracy, "loss": self.loss,
                "latency_ms": lat, "mflops": self.mflops}


@dataclass
class SearchResult:
    best: Candidate
    constraint: tuple[str, float]
    evaluations: int
    history: list[dict]
    candidates: list[Candidate]
    exhausted: bool = False

    @property
    def config(self) -> SubnetConfig:
        return self.best.config

    @property
    def fitness(self) -> float:
        return self.best.accuracy

    def to_json(self, include_candidates: bool = True) -> dict:
        d = {"constraint": {"kind": self.constraint[0], "value": self.constraint[1]},
             "best": self.best.to_json(), "evaluations": self.evaluations, "exhausted": self.exhausted,
             "history": self.history}
        if include_candidates:
            d["candidates"] = [c.to_json() for c in self.candidates]
        return d


Evaluator = Callable[[SubnetConfig], tuple[float, float]]
LatencyFn = Callable[[SpaceSpec, SubnetConfig], float]


def batch_evaluator(weights: SupernetWeights, space: SpaceSpec, batches: Sequence[Batch]) -> Evaluator:
    """Default fitness signal: ``(accuracy, loss)`` on fixed held-out batches."""
    batches = list(batches)

    def run(cfg: SubnetConfig) -> tuple[float, float]:
        r = evaluate(weights, space, cfg, batches)
        return r.accuracy, r.loss
    return run


def _rank_key(c: Candidate):
    return (tuple(-x for x in c.fitness), c.genome)


class _Search:
    def __init__(self, space: SpaceSpec, cfg: SearchConfig, latency: LatencyFn, evaluator: Evaluator):
        self.space, self.cfg, self.latency, self.evaluator = space, cfg, latency, evaluator
        self.kind, self.limit = cfg.constraint
        self.rng = np.random.default_rng(cfg.seed)
        self.seen: dict[tuple, Candidate] = {}
        self.order: list[Candidate] = []

    def measure(self, cfg: SubnetConfig) -> tuple[float, float]:
        lat = self.latency(self.space, cfg)
        return lat, mflops(self.space, cfg)

    def feasible(self, lat: float, fl: float) -> bool:
        return (lat if self.kind == LATENCY else fl) <= self.limit

    @property
    def spent(self) -> int:
        return len(self.order)

    def try_add(self, cfg: SubnetConfig) -> Candidate | None:
        """Evaluate ``cfg`` if it is new and feasible and budget remains."""
        key = encode(self.space, cfg)
        if key in self.seen or self.spent >= self.cfg.budget:
            return None
        lat, fl = self.measure(cfg)
        if not self.feasible(lat, fl):
            return None
        acc, loss = self.evaluator(cfg)
        cand = Candidate(cfg, format_genome(self.space, cfg), float(acc), float(loss), lat, fl)
        self.seen[key] = cand
        self.order.append(cand)
        return cand

    def fresh(self, want: int) -> list[Candidate]:
        out = []
        for _ in range(want * self.cfg.max_attempts):
            if len(out) >= want or self.spent >= self.cfg.budget:
                break
            c = self.try_add(sample_uniform(self.space, self.rng))
            if c is not None:
                out.append(c)
        return out

    def breed(self, parents: list[Candidate], want: int) -> list[Candidate]:
        n_mut = int(round(want * self.cfg.mutate_fraction))
        out = []
        for _ in range(want * self.cfg.max_attempts):
            if len(out) >= want or self.spent >= self.cfg.budget:
                break
            if len(out) < n_mut or len(parents) < 2:
                p = parents[int(self.rng.integers(len(parents)))]
                child = mutate(self.space, p.config, self.cfg.mutation_rate, self.rng)
            else:
                i, j = self.rng.choice(len(parents), size=2, replace=False)
                child = crossover(self.space, parents[i].config, parents[j].config, self.rng)
            c = self.try_add(child)
            if c is not None:
                out.append(c)
        return out

    def run(self) -> SearchResult:
        cfg = self.cfg
        lo = min_subnet(self.space)
        if not self.feasible(*self.measure(lo)):
            raise InfeasibleConstraint(f"min subnet violates {self.kind} <= {self.limit:g}")
        population = self.fresh(cfg.population)
        if not population:
            # the rejection sampler can miss a very tight feasible region; the min subnet never does
            population = [self.try_add(lo)]
        history = []
        n_parents = max(1, int(round(cfg.population * cfg.parent_fraction)))
        exhausted = False
        generation = 0
        while True:
            population.sort(key=_rank_key)
            best = min(self.order, key=_rank_key)
            history.append({"generation": generation, "evaluations": self.spent,
                            "best_fitness": best.accuracy, "best_loss": best.loss, "best_genome": best.genome})
            if self.spent >= cfg.budget or (cfg.generations is not None and generation >= cfg.generations):
                break
            parents = population[:n_parents]
            want = cfg.population - len(parents)
            children = self.breed(parents, want)
            if len(children) < want:
                children += self.fresh(want - len(children))
            if not children:
                exhausted = True
                break
            population = parents + children
            generation += 1
        best = min(self.order, key=_rank_key)
        return SearchResult(best, (self.kind, self.limit), self.spent, history, list(self.order), exhausted)


def search(weights: SupernetWeights | None, space: SpaceSpec, profile: DeviceProfile | LatencyFn | None,
           config: SearchConfig, eval_batches: Sequence[Batch] | None = None,
           evaluator: Evaluator | None = None) -> SearchResult:
    """Evolutionary search for the fittest subnet under the configured constraint.

    Args:
        weights: Trained supernet weights; unused when ``evaluator`` is given.
        space: The search space.
        profile: A :class:`DeviceProfile`, any ``(space, cfg) -> ms`` callable, or
            None for FLOPs-only searches.
        config: Search settings.
        eval_batches: Held-out batches for the default evaluator.
        evaluator: Optional replacement fitness signal returning ``(accuracy, loss)``.

    Raises:
        InfeasibleConstraint: when even the min subnet violates the constraint.
    """
    if evaluator is None:
        if weights is None or eval_batches is None:
            raise ValueError("need weights and eval_batches, or an evaluator")
        evaluator = batch_evaluator(weights, space, eval_batches)
    if isinstance(profile, DeviceProfile):
        latency: LatencyFn = lambda s, c: predict_latency(profile, s, c)  # noqa: E731
    elif profile is None:
        if config.latency_ms is not None:
            raise ValueError("a latency constraint needs a device profile")
        latency = lambda s, c: math.nan  # noqa: E731
    else:
        latency = profile
    return _Search(space, config, latency, evaluator).run()


@dataclass
class SweepEntry:
    constraint: float
    result: SearchResult | None
    error: str | None = None

    def row(self) -> dict:
        if self.result is None:
            return {"constraint": self.constraint, "feasible": False, "latency_ms": None, "mflops": None,
                    "accuracy": None, "loss": None, "genome": None, "error": self.error}
        b = self.result.best
        return {"constraint": self.constraint, "feasible": True, **b.to_json(), "error": None}


def pareto_sweep(weights: SupernetWeights | None, space: SpaceSpec, profile: DeviceProfile | LatencyFn | None,
                 constraints: Sequence[float], config: SearchConfig, eval_batches: Sequence[Batch] | None = None,
                 evaluator: Evaluator | None = None) -> list[SweepEntry]:
    """Independent searches per constraint, sorted by constraint.

    ``constraints`` replace whichever bound ``config`` sets. Infeasible
    constraints are reported in their entry and the sweep carries on.
    """
    if evaluator is None:
        if weights is None or eval_batches is None:
            raise ValueError("need weights and eval_batches, or an evaluator")
        evaluator = batch_evaluator(weights, space, eval_batches)
    memo: dict[tuple, tuple[float, float]] = {}

    def cached(cfg: SubnetConfig) -> tuple[float, float]:
        key = encode(space, cfg)
        if key not in memo:
            memo[key] = evaluator(cfg)
        return memo[key]

    field_name = "latency_ms" if config.latency_ms is not None else "mflops"
    entries = []
    for limit in sorted(float(c) for c in constraints):
        cfg = _with_limit(config, field_name, limit)
        try:
            entries.append(SweepEntry(limit, search(None, space, profile, cfg, evaluator=cached)))
        except InfeasibleConstraint as exc:
            entries.append(SweepEntry(limit, None, str(exc)))
    return entries


def _with_limit(config: SearchConfig, field_name: str, limit: float) -> SearchConfig:
    return replace(config, **{field_name: limit})


def exhaustive_best(space: SpaceSpec, configs, latency: LatencyFn | None, limit: float, kind: str,
                    evaluator: Evaluator) -> Candidate | None:
    """Brute-force optimum over ``configs`` under the same ranking as :func:`search`."""
    best = None
    for cfg in configs:
        fl = mflops(space, cfg)
        lat = latency(space, cfg) if latency is not None else math.nan
        if (lat if kind == LATENCY else fl) > limit:
            continue
        acc, loss = evaluator(cfg)
        cand = Candidate(cfg, format_genome(space, cfg), float(acc), float(loss), lat, fl)
        if best is None or _rank_key(cand) < _rank_key(best):
            best = cand
    return best


__all__ = ["Candidate", "DeviceProfile", "InfeasibleConstraint", "LATENCY", "MFLOPS", "ProfileError",
           "SearchConfig", "SearchResult", "SweepEntry", "batch_evaluator", "exhaustive_best", "load_profile",
           "pareto_sweep", "predict_latency", "profile_from_dict", "search"]
