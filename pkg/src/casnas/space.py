"""Search-space schemas, subnet configurations and the genetic operators over them.

A :class:`SpaceSpec` is an ordered list of :class:`StageSpec` rows plus a set of
input resolutions. A :class:`SubnetConfig` picks one value for every searchable
dimension. Kernel size (V scale for transformer stages) and expansion ratio are
chosen either once per stage or once per layer, depending on
``SpaceSpec.granularity``; the config always stores one entry per active layer.
"""

from __future__ import annotations

import enum
import hashlib
import itertools
import json
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

SCHEMA_VERSION = 1


class BlockKind(str, enum.Enum):
    CONV_STEM = "ConvStem"
    MBV2 = "MBv2"
    MBV3 = "MBv3"
    TRANSFORMER = "Transformer"
    MB_POOL = "MBPool"


FIXED_DEPTH_KINDS = (BlockKind.CONV_STEM, BlockKind.MB_POOL)
CNN_KINDS = (BlockKind.MBV2, BlockKind.MBV3)


class SpaceError(ValueError):
    """Raised for malformed space files or configs that do not fit a space."""


@dataclass(frozen=True)
class StageSpec:
    kind: BlockKind
    depth_range: tuple[int, int]
    channel_range: tuple[int, int, int]
    kernel_or_vscale_choices: tuple[int, ...]
    expansion_choices: tuple[int, ...]
    stride: int = 1

    @property
    def depths(self) -> tuple[int, ...]:
        lo, hi = self.depth_range
        return tuple(range(lo, hi + 1))

    @property
    def channels(self) -> tuple[int, ...]:
        lo, hi, step = self.channel_range
        return tuple(range(lo, hi + 1, step))

    @property
    def kernels(self) -> tuple[int, ...]:
        return self.kernel_or_vscale_choices

    @property
    def expansions(self) -> tuple[int, ...]:
        return self.expansion_choices

    @property
    def max_depth(self) -> int:
        return self.depth_range[1]


@dataclass(frozen=True)
class SpaceSpec:
    """A hybrid CNN-transformer search space.

    Besides the stage table, a space carries the constants the cost model and the
    supernet need: class count, attention head size, per-head Q/K width, the
    expansion ratio of the downsampling block that opens every transformer stage,
    and the FLOPs-per-MAC convention.
    """

    name: str
    stages: tuple[StageSpec, ...]
    resolutions: tuple[int, ...]
    granularity: str = "layer"
    num_classes: int = 1000
    in_channels: int = 3
    head_dim: int = 16
    qk_dim: int = 16
    transition_expansion: int = 6
    flops_per_mac: float = 2.0

    @property
    def layerwise(self) -> bool:
        return self.granularity == "layer"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "schema_version": SCHEMA_VERSION,
            "resolutions": list(self.resolutions),
            "granularity": self.granularity,
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "head_dim": self.head_dim,
            "qk_dim": self.qk_dim,
            "transition_expansion": self.transition_expansion,
            "flops_per_mac": self.flops_per_mac,
            "stages": [
                {
                    "kind": s.kind.value,
                    "depth": list(s.depth_range),
                    "channels": list(s.channel_range),
                    "kernels": list(s.kernel_or_vscale_choices),
                    "expansions": list(s.expansion_choices),
                    "stride": s.stride,
                }
                for s in self.stages
            ],
        }

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form; identifies a space in checkpoints."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class StageConfig:
    depth: int
    channels: int
    kernels: tuple[int, ...]
    expansions: tuple[int, ...]


@dataclass(frozen=True)
class SubnetConfig:
    stages: tuple[StageConfig, ...]
    resolution: int

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(s.depth for s in self.stages)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(s.channels for s in self.stages)


# --------------------------------------------------------------------------- #
# Parsing and validation
# --------------------------------------------------------------------------- #


def space_from_dict(data: dict) -> SpaceSpec:
    try:
        stages = tuple(
            StageSpec(
                kind=BlockKind(row["kind"]),
                depth_range=tuple(int(v) for v in row["depth"]),
                channel_range=tuple(int(v) for v in row["channels"]),
                kernel_or_vscale_choices=tuple(int(v) for v in row["kernels"]),
                expansion_choices=tuple(int(v) for v in row["expansions"]),
                stride=int(row.get("stride", 1)),
            )
            for row in data["stages"]
        )
        version = int(data.get("schema_version", SCHEMA_VERSION))
        if version != SCHEMA_VERSION:
            raise SpaceError(f"unsupported schema_version {version}")
        return SpaceSpec(
            name=str(data["name"]),
            stages=stages,
            resolutions=tuple(int(r) for r in data["resolutions"]),
            granularity=str(data.get("granularity", "layer")),
            num_classes=int(data.get("num_classes", 1000)),
            in_channels=int(data.get("in_channels", 3)),
            head_dim=int(data.get("head_dim", 16)),
            qk_dim=int(data.get("qk_dim", 16)),
            transition_expansion=int(data.get("transition_expansion", 6)),
            flops_per_mac=float(data.get("flops_per_mac", 2.0)),
        )
    except SpaceError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise SpaceError(f"malformed space description: {exc!r}") from exc


def load_space(path_or_name: str | Path) -> SpaceSpec:
    """Load a space file, or a bundled space by bare name (``elasticvit``, ``micro``...)."""
    path = Path(path_or_name)
    if path.suffix != ".space" and not path.exists():
        res = resources.files("casnas") / "spaces" / f"{path_or_name}.space"
        if not res.is_file():
            raise FileNotFoundError(f"no space file or bundled space named {path_or_name!r}")
        text = res.read_text()
    else:
        text = path.read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SpaceError(f"cannot parse space file {path_or_name}: {exc}") from exc
    return space_from_dict(data)


def dump_space(space: SpaceSpec) -> str:
    """Render a space in the ``.space`` TOML layout accepted by :func:`load_space`."""
    d = space.to_dict()
    lines = []
    for key in ("name", "granularity"):
        lines.append(f'{key} = "{d[key]}"')
    for key in ("schema_version", "num_classes", "in_channels", "head_dim", "qk_dim",
                "transition_expansion", "flops_per_mac"):
        lines.append(f"{key} = {d[key]}")
    lines.append(f"resolutions = {d['resolutions']}")
    for row in d["stages"]:
        lines.append("")
        lines.append("[[stages]]")
        lines.append(f'kind = "{row["kind"]}"')
        for key in ("depth", "channels", "kernels", "expansions"):
            lines.append(f"{key} = {row[key]}")
        lines.append(f"stride = {row['stride']}")
    return "\n".join(lines) + "\n"


def validate(space: SpaceSpec) -> list[str]:
    """Return every invariant violation of ``space``; an empty list means valid."""
    errors: list[str] = []
    if not space.stages:
        errors.append("space has no stages")
    if not space.resolutions:
        errors.append("resolutions are empty")
    elif any(r <= 0 for r in space.resolutions):
        errors.append("resolutions must be positive")
    elif any(b <= a for a, b in zip(space.resolutions, space.resolutions[1:])):
        errors.append("resolutions must be strictly increasing")
    if space.granularity not in ("stage", "layer"):
        errors.append(f"granularity must be 'stage' or 'layer', got {space.granularity!r}")
    if space.flops_per_mac <= 0:
        errors.append("flops_per_mac must be positive")
    if space.head_dim <= 0 or space.qk_dim <= 0:
        errors.append("head_dim and qk_dim must be positive")
    for i, st in enumerate(space.stages):
        where = f"stage {i} ({st.kind.value})"
        lo, hi = st.depth_range
        if lo > hi:
            errors.append(f"{where}: depth min {lo} > max {hi}")
        if st.kind in FIXED_DEPTH_KINDS:
            if (lo, hi) != (1, 1):
                errors.append(f"{where}: depth must be fixed at 1")
        elif lo < 1:
            errors.append(f"{where}: depth min must be >= 1")
        cmin, cmax, step = st.channel_range
        if cmin <= 0:
            errors.append(f"{where}: channels must be positive")
        if cmin > cmax:
            errors.append(f"{where}: channel min {cmin} > max {cmax}")
        if step <= 0:
            errors.append(f"{where}: channel step must be positive")
        elif (cmax - cmin) % step:
            errors.append(f"{where}: channel step {step} does not divide {cmax - cmin}")
        if st.kind is BlockKind.TRANSFORMER:
            if step != space.head_dim:
                errors.append(
                    f"{where}: step mismatch, channel step {step} != head size {space.head_dim}"
                )
            if cmin % space.head_dim:
                errors.append(f"{where}: channels must be multiples of the head size")
        if not st.kernel_or_vscale_choices:
            errors.append(f"{where}: kernel/V-scale choices are empty")
        elif any(k <= 0 for k in st.kernel_or_vscale_choices):
            errors.append(f"{where}: kernel/V-scale choices must be positive")
        elif st.kind in CNN_KINDS + (BlockKind.CONV_STEM,) and any(
            k % 2 == 0 for k in st.kernel_or_vscale_choices
        ):
            errors.append(f"{where}: conv kernel sizes must be odd")
        if not st.expansion_choices:
            errors.append(f"{where}: expansion choices are empty")
        elif any(e <= 0 for e in st.expansion_choices):
            errors.append(f"{where}: expansion choices must be positive")
        if len(set(st.kernel_or_vscale_choices)) != len(st.kernel_or_vscale_choices) or len(
            set(st.expansion_choices)
        ) != len(st.expansion_choices):
            errors.append(f"{where}: duplicate choices")
        if st.stride not in (1, 2):
            errors.append(f"{where}: stride must be 1 or 2")
    kinds = [s.kind for s in space.stages]
    if kinds and kinds[0] is not BlockKind.CONV_STEM:
        errors.append("first stage must be ConvStem")
    if kinds and kinds[-1] is not BlockKind.MB_POOL:
        errors.append("last stage must be MBPool")
    if kinds.count(BlockKind.CONV_STEM) > 1 or kinds.count(BlockKind.MB_POOL) > 1:
        errors.append("ConvStem and MBPool may appear only once")
    return errors


def check_valid(space: SpaceSpec) -> None:
    errors = validate(space)
    if errors:
        raise SpaceError("; ".join(errors))


def config_errors(space: SpaceSpec, cfg: SubnetConfig) -> list[str]:
    """Return the reasons ``cfg`` is not a member of ``space`` (empty if it is)."""
    errors: list[str] = []
    if len(cfg.stages) != len(space.stages):
        return [f"config has {len(cfg.stages)} stages, space has {len(space.stages)}"]
    if cfg.resolution not in space.resolutions:
        errors.append(f"resolution {cfg.resolution} not in {space.resolutions}")
    for i, (st, sc) in enumerate(zip(space.stages, cfg.stages)):
        if sc.depth not in st.depths:
            errors.append(f"stage {i}: depth {sc.depth} outside {st.depth_range}")
        if sc.channels not in st.channels:
            errors.append(f"stage {i}: channels {sc.channels} not a choice")
        if len(sc.kernels) != sc.depth or len(sc.expansions) != sc.depth:
            errors.append(f"stage {i}: per-layer choice count differs from depth {sc.depth}")
            continue
        if any(k not in st.kernels for k in sc.kernels):
            errors.append(f"stage {i}: kernel/V-scale choice outside {st.kernels}")
        if any(e not in st.expansions for e in sc.expansions):
            errors.append(f"stage {i}: expansion choice outside {st.expansions}")
        if not space.layerwise and (len(set(sc.kernels)) > 1 or len(set(sc.expansions)) > 1):
            errors.append(f"stage {i}: per-stage granularity needs identical layer choices")
    return errors


def check_config(space: SpaceSpec, cfg: SubnetConfig) -> None:
    errors = config_errors(space, cfg)
    if errors:
        raise SpaceError("; ".join(errors))


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #


def _choice(rng: np.random.Generator, options: Sequence[int]) -> int:
    return options[int(rng.integers(len(options)))]


def _sample_layers(st: StageSpec, depth: int, layerwise: bool, rng) -> tuple[tuple, tuple]:
    if layerwise:
        kernels = tuple(_choice(rng, st.kernels) for _ in range(depth))
        expansions = tuple(_choice(rng, st.expansions) for _ in range(depth))
    else:
        kernels = (_choice(rng, st.kernels),) * depth
        expansions = (_choice(rng, st.expansions),) * depth
    return kernels, expansions


def sample_uniform(space: SpaceSpec, rng: np.random.Generator) -> SubnetConfig:
    """Draw every dimension independently and uniformly from its choice set."""
    stages = []
    for st in space.stages:
        depth = _choice(rng, st.depths)
        channels = _choice(rng, st.channels)
        kernels, expansions = _sample_layers(st, depth, space.layerwise, rng)
        stages.append(StageConfig(depth, channels, kernels, expansions))
    return SubnetConfig(tuple(stages), _choice(rng, space.resolutions))


def _extreme(space: SpaceSpec, pick) -> SubnetConfig:
    stages = []
    for st in space.stages:
        depth = pick(st.depths)
        stages.append(
            StageConfig(depth, pick(st.channels), (pick(st.kernels),) * depth,
                        (pick(st.expansions),) * depth)
        )
    return SubnetConfig(tuple(stages), pick(space.resolutions))


def min_subnet(space: SpaceSpec) -> SubnetConfig:
    return _extreme(space, min)


def max_subnet(space: SpaceSpec) -> SubnetConfig:
    return _extreme(space, max)


# --------------------------------------------------------------------------- #
# Encoding
# --------------------------------------------------------------------------- #


def _slots(space: SpaceSpec, st: StageSpec) -> int:
    return st.max_depth if space.layerwise else 1


def genome_length(space: SpaceSpec) -> int:
    return 1 + sum(2 + 2 * _slots(space, st) for st in space.stages)


def encode(space: SpaceSpec, cfg: SubnetConfig) -> tuple[int, ...]:
    """Flatten ``cfg`` into a fixed-length vector of choice indices.

    Layout: resolution index, then per stage depth index, channel index, kernel
    slots and expansion slots. Slots of inactive layers hold 0.
    """
    out = [space.resolutions.index(cfg.resolution)]
    for st, sc in zip(space.stages, cfg.stages):
        n = _slots(space, st)
        out.append(st.depths.index(sc.depth))
        out.append(st.channels.index(sc.channels))
        ks = [st.kernels.index(k) for k in sc.kernels[:n]]
        es = [st.expansions.index(e) for e in sc.expansions[:n]]
        out.extend(ks + [0] * (n - len(ks)))
        out.extend(es + [0] * (n - len(es)))
    return tuple(out)


def decode(space: SpaceSpec, genome: Sequence[int]) -> SubnetConfig:
    if len(genome) != genome_length(space):
        raise SpaceError(f"genome length {len(genome)} != {genome_length(space)}")
    it = iter(int(g) for g in genome)
    try:
        resolution = space.resolutions[next(it)]
        stages = []
        for st in space.stages:
            n = _slots(space, st)
            depth = st.depths[next(it)]
            channels = st.channels[next(it)]
            ks = [st.kernels[next(it)] for _ in range(n)]
            es = [st.expansions[next(it)] for _ in range(n)]
            if space.layerwise:
                kernels, expansions = tuple(ks[:depth]), tuple(es[:depth])
            else:
                kernels, expansions = (ks[0],) * depth, (es[0],) * depth
            stages.append(StageConfig(depth, channels, kernels, expansions))
    except IndexError as exc:
        raise SpaceError(f"genome index out of range: {list(genome)}") from exc
    return SubnetConfig(tuple(stages), resolution)


def format_genome(space: SpaceSpec, cfg: SubnetConfig) -> str:
    """Serialize as ``<space name> v<schema> i0 i1 ...``."""
    return " ".join([space.name, f"v{SCHEMA_VERSION}", *map(str, encode(space, cfg))])


def parse_genome(space: SpaceSpec, text: str) -> SubnetConfig:
    parts = text.split()
    if len(parts) < 2 or parts[0] != space.name or parts[1] != f"v{SCHEMA_VERSION}":
        raise SpaceError(f"encoded subnet does not belong to space {space.name!r}: {text!r}")
    return decode(space, [int(p) for p in parts[2:]])


# --------------------------------------------------------------------------- #
# Genetic operators
# --------------------------------------------------------------------------- #


def mutate(space: SpaceSpec, cfg: SubnetConfig, rate: float, rng: np.random.Generator) -> SubnetConfig:
    """Resample each dimension independently with probability ``rate``.

    Layers added by a depth increase draw fresh uniform choices; under per-stage
    granularity they copy the stage's (possibly mutated) shared choice.
    """
    resolution = _choice(rng, space.resolutions) if rng.random() < rate else cfg.resolution
    stages = []
    for st, sc in zip(space.stages, cfg.stages):
        depth = _choice(rng, st.depths) if rng.random() < rate else sc.depth
        channels = _choice(rng, st.channels) if rng.random() < rate else sc.channels
        if space.layerwise:
            ks, es = [], []
            for i in range(depth):
                k = sc.kernels[i] if i < sc.depth else _choice(rng, st.kernels)
                e = sc.expansions[i] if i < sc.depth else _choice(rng, st.expansions)
                if rng.random() < rate:
                    k = _choice(rng, st.kernels)
                if rng.random() < rate:
                    e = _choice(rng, st.expansions)
                ks.append(k)
                es.append(e)
            kernels, expansions = tuple(ks), tuple(es)
        else:
            k = _choice(rng, st.kernels) if rng.random() < rate else sc.kernels[0]
            e = _choice(rng, st.expansions) if rng.random() < rate else sc.expansions[0]
            kernels, expansions = (k,) * depth, (e,) * depth
        stages.append(StageConfig(depth, channels, kernels, expansions))
    return SubnetConfig(tuple(stages), resolution)


def crossover(space: SpaceSpec, a: SubnetConfig, b: SubnetConfig, rng: np.random.Generator) -> SubnetConfig:
    """Uniform crossover.

    The child's depth in each stage comes from one parent; per-layer choices are
    inherited positionally from that parent, except that positions present in
    both parents are drawn from either with probability 1/2.
    """
    if len(a.stages) != len(space.stages) or len(b.stages) != len(space.stages):
        raise SpaceError("crossover parents do not belong to the given space")
    pick = lambda x, y: x if rng.random() < 0.5 else y  # noqa: E731
    resolution = pick(a.resolution, b.resolution)
    stages = []
    for sa, sb in zip(a.stages, b.stages):
        src, other = (sa, sb) if rng.random() < 0.5 else (sb, sa)
        depth = src.depth
        channels = pick(sa.channels, sb.channels)
        if space.layerwise:
            ks, es = [], []
            for i in range(depth):
                if i < other.depth:
                    ks.append(pick(src.kernels[i], other.kernels[i]))
                    es.append(pick(src.expansions[i], other.expansions[i]))
                else:
                    ks.append(src.kernels[i])
                    es.append(src.expansions[i])
            kernels, expansions = tuple(ks), tuple(es)
        else:
            k = pick(sa.kernels[0], sb.kernels[0])
            e = pick(sa.expansions[0], sb.expansions[0])
            kernels, expansions = (k,) * depth, (e,) * depth
        stages.append(StageConfig(depth, channels, kernels, expansions))
    return SubnetConfig(tuple(stages), resolution)


# --------------------------------------------------------------------------- #
# Counting and enumeration
# --------------------------------------------------------------------------- #


def _stage_count(space: SpaceSpec, st: StageSpec) -> int:
    per_layer = len(st.kernels) * len(st.expansions)
    if space.layerwise:
        return len(st.channels) * sum(per_layer**d for d in st.depths)
    return len(st.channels) * len(st.depths) * per_layer


@dataclass(frozen=True)
class Cardinality:
    exact: int
    log10: float


def cardinality(space: SpaceSpec) -> Cardinality:
    """Count distinct subnets.

    Different depths are different subnets; per-layer choices only count for
    active layers. Resolution is a searchable dimension and is included.
    """
    total = len(space.resolutions)
    for st in space.stages:
        total *= _stage_count(space, st)
    return Cardinality(total, math.log10(total))


def iter_subnets(space: SpaceSpec) -> Iterator[SubnetConfig]:
    """Enumerate every subnet of ``space``. Only sensible for tiny spaces."""
    per_stage = []
    for st in space.stages:
        options = []
        for depth in st.depths:
            for channels in st.channels:
                if space.layerwise:
                    layer_opts = list(itertools.product(st.kernels, st.expansions))
                    for combo in itertools.product(layer_opts, repeat=depth):
                        options.append(StageConfig(depth, channels, tuple(c[0] for c in combo),
                                                   tuple(c[1] for c in combo)))
                else:
                    for k, e in itertools.product(st.kernels, st.expansions):
                        options.append(StageConfig(depth, channels, (k,) * depth, (e,) * depth))
        per_stage.append(options)
    for res in space.resolutions:
        for combo in itertools.product(*per_stage):
            yield SubnetConfig(tuple(combo), res)


def dominates(a: SubnetConfig, b: SubnetConfig) -> bool:
    """True when ``a`` is at least ``b`` in every dimension (depth-aligned)."""
    if a.resolution < b.resolution:
        return False
    for sa, sb in zip(a.stages, b.stages):
        if sa.depth < sb.depth or sa.channels < sb.channels:
            return False
        if any(x < y for x, y in zip(sa.kernels, sb.kernels)):
            return False
        if any(x < y for x, y in zip(sa.expansions, sb.expansions)):
            return False
    return True


def with_stage(cfg: SubnetConfig, index: int, **changes) -> SubnetConfig:
    """Return ``cfg`` with fields of stage ``index`` replaced."""
    stages = list(cfg.stages)
    stages[index] = replace(stages[index], **changes)
    return SubnetConfig(tuple(stages), cfg.resolution)


def transformer_stage_indices(space: SpaceSpec) -> list[int]:
    return [i for i, st in enumerate(space.stages) if st.kind is BlockKind.TRANSFORMER]


__all__ = [
    "BlockKind", "Cardinality", "SCHEMA_VERSION", "SpaceError", "SpaceSpec", "StageConfig",
    "StageSpec", "SubnetConfig", "cardinality", "check_config", "check_valid", "config_errors",
    "crossover", "decode", "dominates", "dump_space", "encode", "format_genome", "genome_length",
    "iter_subnets", "load_space", "max_subnet", "min_subnet", "mutate", "parse_genome",
    "sample_uniform", "space_from_dict", "transformer_stage_indices", "validate", "with_stage",
]
