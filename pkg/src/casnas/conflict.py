"""Gradient-conflict analysis between subnets of a frozen supernet.

Two subnets "agree" when the gradients they induce on their shared weights
point the same way. Every routine here is read-only on the weights.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .flops import mflops
from .ladder import SamplingExhausted, sample_in_band
from .micronet import Batch, SliceMap, SupernetWeights, as_index, loss_and_grads, shared_params
from .space import SpaceSpec, SubnetConfig, format_genome
from .trainer import evaluate


class Cosine(NamedTuple):
    value: float
    degenerate: bool  # True when either restricted gradient is exactly zero


def restrict(grads: dict[str, np.ndarray], region: SliceMap) -> np.ndarray:
    """Flatten the entries of ``grads`` inside ``region`` (sorted by parameter name)."""
    parts = [grads[name][as_index(spans)].ravel() for name, spans in sorted(region.items())]
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts).astype(np.float64)


def cosine(u: np.ndarray, v: np.ndarray) -> Cosine:
    nu, nv = float(np.linalg.norm(u)), float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return Cosine(0.0, True)
    return Cosine(float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)), False)


def subnet_grads(weights: SupernetWeights, space: SpaceSpec, cfg: SubnetConfig, batch: Batch,
                 loss_scale: float = 1.0) -> dict[str, np.ndarray]:
    res = loss_and_grads(weights, space, cfg, batch.inputs, batch.labels, full=True)
    if loss_scale != 1.0:
        return {k: v * loss_scale for k, v in res.grads.items()}
    return res.grads


def grad_cosine(weights: SupernetWeights, space: SpaceSpec, cfg_a: SubnetConfig, cfg_b: SubnetConfig,
                batch: Batch) -> Cosine:
    """Cosine similarity of the two subnets' gradients on their shared weights."""
    ga = subnet_grads(weights, space, cfg_a, batch)
    gb = ga if cfg_b == cfg_a else subnet_grads(weights, space, cfg_b, batch)
    region = shared_params(space, cfg_a, cfg_b)
    return cosine(restrict(ga, region), restrict(gb, region))


def cosine_matrix(space: SpaceSpec, cfgs: Sequence[SubnetConfig],
                  grads: Sequence[dict[str, np.ndarray]]) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Pairwise cosine matrix from precomputed gradients; also returns degenerate pairs."""
    n = len(cfgs)
    mat = np.eye(n)
    degenerate = []
    for i in range(n):
        for j in range(i, n):
            region = shared_params(space, cfgs[i], cfgs[j])
            c = cosine(restrict(grads[i], region), restrict(grads[j], region))
            mat[i, j] = mat[j, i] = c.value
            if c.degenerate:
                degenerate.append((i, j))
    return mat, degenerate


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation; NaN when either series is constant."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.size < 2:
        return math.nan
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    return float(dx @ dy) / denom if denom > 0 else math.nan


@dataclass
class SimilarityReport:
    subnets: list[str]
    mflops: list[float]
    targets: list[float]
    matrix: np.ndarray
    buckets: list[dict] = field(default_factory=list)
    correlation: float = math.nan
    degenerate_pairs: list[tuple[int, int]] = field(default_factory=list)
    checkpoint: str | None = None

    def advisory(self) -> dict:
        observed = "negative" if self.correlation < 0 else "non-negative"
        return {"expected": "negative", "observed": observed,
                "consistent": bool(self.correlation < 0)}

    def to_json(self) -> dict:
        return {
            "subnets": self.subnets,
            "mflops": self.mflops,
            "targets": self.targets,
            "matrix": self.matrix.tolist(),
            "buckets": self.buckets,
            "pearson_gap_vs_similarity": None if math.isnan(self.correlation) else self.correlation,
            "degenerate_pairs": [list(p) for p in self.degenerate_pairs],
            "advisory": self.advisory(),
            "checkpoint": self.checkpoint,
        }


def similarity_sweep(weights: SupernetWeights, space: SpaceSpec, flops_targets: Sequence[float],
                     n_per_target: int, batch: Batch, rng: np.random.Generator, band: float = 0.10,
                     max_attempts: int = 2000) -> SimilarityReport:
    """Sample subnets around each FLOPs target and compare all pairs.

    Pairs are bucketed by the gap between their targets; the report also carries
    the Pearson correlation between per-pair MFLOPs gap and cosine.
    """
    cfgs: list[SubnetConfig] = []
    group: list[float] = []
    for t in flops_targets:
        for _ in range(n_per_target):
            s = sample_in_band(space, t * (1 - band), t * (1 + band), rng, max_attempts, strict=True)
            cfgs.append(s.config)
            group.append(float(t))
    grads = [subnet_grads(weights, space, c, batch) for c in cfgs]
    mat, degenerate = cosine_matrix(space, cfgs, grads)
    fl = [mflops(space, c) for c in cfgs]
    gaps, sims = [], []
    by_gap: dict[float, list[float]] = {}
    for i, j in itertools.combinations(range(len(cfgs)), 2):
        gaps.append(abs(fl[i] - fl[j]))
        sims.append(mat[i, j])
        by_gap.setdefault(abs(group[i] - group[j]), []).append(mat[i, j])
    buckets = [{"target_gap": g, "pairs": len(v), "mean_similarity": float(np.mean(v))}
               for g, v in sorted(by_gap.items())]
    return SimilarityReport([format_genome(space, c) for c in cfgs], fl, group, mat, buckets,
                            pearson(gaps, sims), degenerate)


def mean_offdiag(mat: np.ndarray, idx: Sequence[int]) -> float:
    """Mean of ``mat[i, j]`` over unordered pairs ``i < j`` drawn from ``idx``."""
    pairs = list(itertools.combinations(idx, 2))
    if not pairs:
        return math.nan
    return float(np.mean([mat[i, j] for i, j in pairs]))


@dataclass
class GoodVsRandom:
    top_mean: float
    random_mean: float
    level_mflops: float
    subnets: list[str]
    eval_losses: list[float]
    top_indices: list[int]
    matrix: np.ndarray

    def to_json(self) -> dict:
        return {"top_mean_similarity": self.top_mean, "random_mean_similarity": self.random_mean,
                "level_mflops": self.level_mflops, "subnets": self.subnets,
                "eval_losses": self.eval_losses, "top_indices": self.top_indices,
                "matrix": self.matrix.tolist(),
                "advisory": {"expected": "top > random", "consistent": bool(self.top_mean > self.random_mean)}}


def good_vs_random(weights: SupernetWeights, space: SpaceSpec, level_mflops: float, n: int, k_top: int,
                   eval_batches: list[Batch], batch: Batch, rng: np.random.Generator, band: float = 0.10,
                   max_attempts: int = 2000) -> GoodVsRandom:
    """Mean pairwise cosine among the ``k_top`` lowest-loss of ``n`` same-level subnets vs all ``n``."""
    if not 1 <= k_top <= n:
        raise ValueError("need 1 <= k_top <= n")
    lo, hi = level_mflops * (1 - band), level_mflops * (1 + band)
    cfgs = [sample_in_band(space, lo, hi, rng, max_attempts, strict=True).config for _ in range(n)]
    losses = [evaluate(weights, space, c, eval_batches).loss for c in cfgs]
    order = sorted(range(n), key=lambda i: (losses[i], i))
    top = sorted(order[:k_top])
    grads = [subnet_grads(weights, space, c, batch) for c in cfgs]
    mat, _ = cosine_matrix(space, cfgs, grads)
    return GoodVsRandom(mean_offdiag(mat, top), mean_offdiag(mat, range(n)), level_mflops,
                        [format_genome(space, c) for c in cfgs], losses, top, mat)


__all__ = ["Cosine", "GoodVsRandom", "SamplingExhausted", "SimilarityReport", "cosine", "cosine_matrix",
           "good_vs_random", "grad_cosine", "mean_offdiag", "pearson", "restrict", "similarity_sweep",
           "subnet_grads"]
