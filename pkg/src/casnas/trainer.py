"""Supernet training loops: sandwich-rule baseline and conflict-aware elastic mode.

A step trains several subnets on one shared mini-batch, sums their gradients and
applies a single optimizer update. Everything random flows from the run seed:
the sampler stream is checkpointed and data batches are a pure function of
``(seed, step)``, so a resumed run replays the uninterrupted trace exactly.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint as ckpt_io
from .flops import mflops
from .ladder import (DEFAULT_BAND, DEFAULT_MAX_ATTEMPTS,
                     ComplexityLadder, HssSet, LadderState, build_hss, nearest_min_index, next_level)
from .micronet import (Batch, SGDHyper, SGDState, SupernetWeights, SyntheticClusters, TensorDataset,
                       apply_update, backward, forward, init_weights, resize_inputs)
from .perfsample import (DEFAULT_CAPACITY, DEFAULT_MAX_PREF_ATTEMPTS, MemoryBank, QSchedule,
                         bank_update, q_at, sample_mixture)
from .space import (SpaceSpec, SubnetConfig, check_valid, format_genome, load_space, max_subnet,
                    min_subnet, parse_genome, sample_uniform)

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

SANDWICH = "sandwich"
ELASTIC = "elastic"

# Ladder and HSS sized for the bundled micro space (0.16 to 6.7 MFLOPs).
MICRO_LEVELS = (0.5, 0.75, 1.1, 1.6, 2.4, 3.5)
MICRO_HSS_TARGETS = (0.16, 0.6, 1.3)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Run configuration; mirrors the TOML run file (see README for the layout)."""

    mode: str = ELASTIC
    total_steps: int = 500
    batch_size: int = 16
    M: int | None = None
    seed: int = 0
    space: str = "micro"
    dtype: str = "float32"
    lr: float = 0.02
    lr_schedule: str = "constant"
    min_lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float | None = 2.0
    ladder: tuple[float, ...] = MICRO_LEVELS
    hss_targets: tuple[float, ...] = MICRO_HSS_TARGETS
    band: float = DEFAULT_BAND
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    q0: float = 0.2
    q_max: float = 0.8
    bank_capacity: int = DEFAULT_CAPACITY
    max_pref_attempts: int = DEFAULT_MAX_PREF_ATTEMPTS
    dataset: str = "synthetic"
    dataset_path: str | None = None
    classes: int = 8
    noise: float = 1.0
    image_size: int = 32
    eval_batches: int = 4
    eval_batch_size: int = 64
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.mode not in (SANDWICH, ELASTIC):
            raise ConfigError(f"mode must be {SANDWICH!r} or {ELASTIC!r}, got {self.mode!r}")
        if self.M is None:
            self.M = 3 if self.mode == ELASTIC else 2
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        if self.dataset not in ("synthetic", "file"):
            raise ConfigError("dataset must be 'synthetic' or 'file'")
        if self.dataset == "file" and (not self.dataset_path or not Path(self.dataset_path).is_file()):
            raise ConfigError(f"dataset file {self.dataset_path!r} does not exist")
        self.ladder = tuple(float(c) for c in self.ladder)
        self.hss_targets = tuple(float(c) for c in self.hss_targets)

    @classmethod
    def from_toml(cls, path: str | Path, **overrides) -> "TrainConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        flat: dict[str, Any] = {}
        for key, value in data.items():
            if isinstance(value, dict):
                for sub, v in value.items():
                    flat[_SECTION_KEYS.get((key, sub), f"{key}_{sub}")] = v
            else:
                flat[key] = value
        space = flat.get("space")
        if space and not Path(space).is_absolute() and (path.parent / space).is_file():
            flat["space"] = str(path.parent / space)
        flat.update({k: v for k, v in overrides.items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**flat)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["ladder"] = list(self.ladder)
        d["hss_targets"] = list(self.hss_targets)
        return d


_SECTION_KEYS = {
    ("ladder", "levels"): "ladder", ("ladder", "hss_targets"): "hss_targets",
    ("ladder", "band"): "band", ("ladder", "max_attempts"): "max_attempts",
    ("q", "q0"): "q0", ("q", "q_max"): "q_max", ("bank", "capacity"): "bank_capacity",
    ("preference", "max_attempts"): "max_pref_attempts",
    ("optimizer", "lr"): "lr", ("optimizer", "schedule"): "lr_schedule",
    ("optimizer", "min_lr"): "min_lr", ("optimizer", "momentum"): "momentum",
    ("optimizer", "weight_decay"): "weight_decay", ("optimizer", "clip_norm"): "clip_norm",
    ("data", "kind"): "dataset", ("data", "path"): "dataset_path", ("data", "classes"): "classes",
    ("data", "noise"): "noise", ("data", "image_size"): "image_size",
    ("data", "eval_batches"): "eval_batches", ("data", "eval_batch_size"): "eval_batch_size",
}


@dataclass
class SubnetRecord:
    role: str  # "min" | "max" | "random" | "stochastic"
    genome: str
    mflops: float
    loss: float
    tag: str | None = None


@dataclass
class StepRecord:
    step: int
    mode: str
    lr: float
    subnets: list[SubnetRecord]
    level: int | None = None
    level_mflops: float | None = None
    nearest_min: int | None = None
    q: float | None = None
    pref_rejections: int = 0
    pref_exhausted: int = 0
    band_fallbacks: int = 0
    bank_changes: int = 0

    @property
    def loss_mean(self) -> float:
        return math.fsum(s.loss for s in self.subnets) / len(self.subnets)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["loss_mean"] = self.loss_mean
        return d


@dataclass
class EvalResult:
    loss: float
    accuracy: float


def evaluate(weights: SupernetWeights, space: SpaceSpec, cfg: SubnetConfig, batches: list[Batch]) -> EvalResult:
    """Mean cross-entropy and top-1 accuracy over fixed evaluation batches."""
    total_loss = 0.0
    correct = 0
    count = 0
    for b in batches:
        cache = forward(weights, space, cfg, resize_inputs(b.inputs, cfg.resolution))
        z = cache.logits.data.astype(np.float64)
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total_loss += float(-logp[np.arange(len(b.labels)), b.labels].sum())
        correct += int((z.argmax(axis=1) == b.labels).sum())
        count += len(b.labels)
    return EvalResult(total_loss / count, correct / count)


def make_dataset(config: TrainConfig, space: SpaceSpec):
    if config.dataset == "file":
        return TensorDataset.from_file(config.dataset_path, seed=config.seed)
    return SyntheticClusters(classes=config.classes, channels=space.in_channels, size=config.image_size,
                             noise=config.noise, seed=config.seed)


def accumulate(buffer: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if name in buffer:
            buffer[name] += g
        else:
            buffer[name] = g.copy()


class Trainer:
    """Owns the weights, optimizer, sampler state and data stream of one run."""

    def __init__(self, config: TrainConfig, space: SpaceSpec | None = None):
        self.config = config
        self.space = space if space is not None else load_space(config.space)
        check_valid(self.space)
        if config.classes != self.space.num_classes and config.dataset == "synthetic":
            raise ConfigError(f"config classes {config.classes} != space classes {self.space.num_classes}")
        dtype = np.dtype(config.dtype)
        self.weights = init_weights(self.space, np.random.default_rng([config.seed, 1]), dtype)
        self.opt_state = SGDState()
        self.hyper = SGDHyper(config.lr, config.momentum, config.weight_decay, config.clip_norm)
        self.rng = np.random.default_rng([config.seed, 2])
        self.data = make_dataset(config, self.space)
        self.eval_set = self.data.eval_batches(config.eval_batches, config.eval_batch_size)
        self.step = 0
        self.min_cfg = min_subnet(self.space)
        self.max_cfg = max_subnet(self.space)
        self.ladder: ComplexityLadder | None = None
        self.hss: HssSet | None = None
        self.bank: MemoryBank | None = None
        self.ladder_state = LadderState()
        self.q_schedule = QSchedule(config.q0, config.q_max)
        if config.mode == ELASTIC:
            self.ladder = ComplexityLadder(config.ladder, config.band)
            self.hss = build_hss(self.space, config.hss_targets, np.random.default_rng([config.seed, 3]),
                                 config.band)
            self.bank = MemoryBank(len(self.ladder), config.bank_capacity)

    # ------------------------------------------------------------------ #

    def lr_at(self, step: int) -> float:
        c = self.config
        if c.lr_schedule == "cosine":
            return c.min_lr + 0.5 * (c.lr - c.min_lr) * (1 + math.cos(math.pi * step / c.total_steps))
        return c.lr

    def _train_subnets(self, cfgs: list[SubnetConfig], batch: Batch) -> tuple[list[float], dict]:
        grads: dict[str, np.ndarray] = {}
        losses = []
        for cfg in cfgs:
            cache = forward(self.weights, self.space, cfg, resize_inputs(batch.inputs, cfg.resolution))
            res = backward(cache, batch.labels, full=False)
            accumulate(grads, res.grads)
            losses.append(res.loss)
        return losses, grads

    def _update(self, grads: dict, lr: float) -> None:
        apply_update(self.weights, grads, self.opt_state, dataclasses.replace(self.hyper, lr=lr))

    def train_step_sandwich(self) -> StepRecord:
        cfgs = [self.min_cfg, self.max_cfg] + [sample_uniform(self.space, self.rng) for _ in range(self.config.M)]
        roles = ["min", "max"] + ["random"] * self.config.M
        batch = self.data.batch(self.step, self.config.batch_size)
        losses, grads = self._train_subnets(cfgs, batch)
        lr = self.lr_at(self.step)
        self._update(grads, lr)
        subnets = [SubnetRecord(r, format_genome(self.space, c), mflops(self.space, c), l)
                   for r, c, l in zip(roles, cfgs, losses)]
        rec = StepRecord(self.step, SANDWICH, lr, subnets)
        self.step += 1
        return rec

    def train_step_elastic(self) -> StepRecord:
        space, ladder, bank, c = self.space, self.ladder, self.bank, self.config
        if self.step == 0:
            j = self.ladder_state.current_level_index
        else:
            j = next_level(self.ladder_state, ladder, self.rng)
        level = ladder.levels[j]
        n = nearest_min_index(self.hss, level)
        q = q_at(self.q_schedule, self.step, c.total_steps)
        anchor = bank.anchor(j)
        draws = [sample_mixture(space, ladder, j, bank, q, self.rng, anchor, c.max_pref_attempts, c.max_attempts)
                 for _ in range(c.M)]
        cfgs = [self.hss.subnets[n]] + [d.config for d in draws]
        batch = self.data.batch(self.step, c.batch_size)
        losses, grads = self._train_subnets(cfgs, batch)
        lr = self.lr_at(self.step)
        self._update(grads, lr)
        changes = 0
        lo, hi = ladder.bounds(j)
        for d, loss in zip(draws, losses[1:]):
            if lo <= d.mflops <= hi and math.isfinite(loss):
                changes += bank_update(space, bank, j, d.config, loss, self.step)
        subnets = [SubnetRecord("min", format_genome(space, cfgs[0]), self.hss.flops[n], losses[0])]
        subnets += [SubnetRecord("stochastic", format_genome(space, d.config), d.mflops, l, d.tag.value)
                    for d, l in zip(draws, losses[1:])]
        rec = StepRecord(self.step, ELASTIC, lr, subnets, j, level, n, q,
                         sum(d.rejections for d in draws), sum(d.exhausted for d in draws),
                         sum(d.band_fallbacks for d in draws), changes)
        self.step += 1
        return rec

    def train_step(self) -> StepRecord:
        if self.config.mode == ELASTIC:
            return self.train_step_elastic()
        return self.train_step_sandwich()

    # ------------------------------------------------------------------ #

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        meta = {
            "step": self.step,
            "updates": self.opt_state.updates,
            "rng": self.rng.bit_generator.state,
            "level_index": self.ladder_state.current_level_index,
            "level_steps": self.ladder_state.step_count,
            "config": self.config.to_json(),
        }
        if self.hss is not None:
            meta["hss"] = [format_genome(self.space, s) for s in self.hss.subnets]
            meta["bank"] = self.bank.to_json(self.space)
        return ckpt_io.Checkpoint(self.space.digest(), dict(self.weights.params),
                                  dict(self.opt_state.momentum_buffers), meta)

    def load_state(self, ck: ckpt_io.Checkpoint) -> None:
        if ck.space_digest != self.space.digest():
            raise ckpt_io.CheckpointError("checkpoint belongs to a different space")
        self.weights = SupernetWeights(self.space, {k: v.copy() for k, v in ck.weights.items()})
        self.opt_state = SGDState({k: v.copy() for k, v in ck.optimizer.items()}, ck.meta["updates"])
        self.rng.bit_generator.state = ck.meta["rng"]
        self.step = ck.meta["step"]
        self.ladder_state = LadderState(ck.meta["level_index"], ck.meta["level_steps"])
        if "hss" in ck.meta and self.config.mode == ELASTIC:
            self.hss = HssSet.from_subnets(self.space, [parse_genome(self.space, g) for g in ck.meta["hss"]])
            self.bank = MemoryBank.from_json(self.space, ck.meta["bank"])


def weights_from_checkpoint(path: str | Path, space: SpaceSpec | None = None) -> tuple[SpaceSpec, SupernetWeights, dict]:
    """Load supernet weights (and the run metadata) from a training checkpoint."""
    ck = ckpt_io.load_checkpoint(path)
    if space is None:
        space = load_space(ck.meta["config"]["space"])
    if ck.space_digest != space.digest():
        raise ckpt_io.CheckpointError(f"{path} was written for a different space")
    return space, SupernetWeights(space, ck.weights), ck.meta


@dataclass
class RunResult:
    trainer: Trainer
    records: list[StepRecord] = field(default_factory=list)
    metrics_path: Path | None = None
    checkpoint_path: Path | None = None


def run(config: TrainConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
        stop_after: int | None = None, space: SpaceSpec | None = None) -> RunResult:
    """Train for ``config.total_steps`` steps (or until step ``stop_after``).

    With ``out_dir`` the StepRecords go to ``metrics.jsonl`` and checkpoints to
    ``checkpoint-<step>.bin`` (every ``checkpoint_every`` steps and at the end).
    Resuming truncates the metrics log to the checkpoint step and continues.
    """
    trainer = Trainer(config, space)
    if resume is not None:
        trainer.load_state(ckpt_io.load_checkpoint(resume, trainer.space))
    result = RunResult(trainer)
    end = config.total_steps if stop_after is None else min(stop_after, config.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        result.metrics_path = out / "metrics.jsonl"
        kept = []
        if resume is not None and result.metrics_path.exists():
            kept = [ln for ln in result.metrics_path.read_text().splitlines()
                    if ln and json.loads(ln)["step"] < trainer.step]
        fh = open(result.metrics_path, "w")
        for ln in kept:
            fh.write(ln + "\n")
    try:
        while trainer.step < end:
            rec = trainer.train_step()
            result.records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec.to_json()) + "\n")
            if out is not None and config.checkpoint_every and trainer.step % config.checkpoint_every == 0:
                fh.flush()
                ckpt_io.save_checkpoint(out / f"checkpoint-{trainer.step}.bin", trainer.to_checkpoint())
            if trainer.step % 100 == 0:
                log.info("step %d loss %.4f", trainer.step, rec.loss_mean)
    finally:
        if fh is not None:
            fh.close()
        if out is not None:
            result.checkpoint_path = out / f"checkpoint-{trainer.step}.bin"
            ckpt_io.save_checkpoint(result.checkpoint_path, trainer.to_checkpoint())
    return result


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(ln) for ln in Path(path).read_text().splitlines() if ln]
