"""Datasets for desk-scale supernet training.

``SyntheticClusters`` draws images around one smooth prototype per class; every
batch is a pure function of ``(seed, index)`` so training traces are replayable.
``TensorDataset`` wraps a raw dump file (see :func:`save_dump`).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DUMP_MAGIC = b"CASNDATA"
_EVAL_OFFSET = 1 << 40


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray  # (B, C, H, W)
    labels: np.ndarray  # (B,)


class SyntheticClusters:
    """Gaussian clusters around low-frequency class prototypes.

    Prototypes are drawn on a ``grid x grid`` lattice and upsampled, so class
    identity survives nearest-neighbour resizing to any supported resolution.
    """

    def __init__(self, classes: int = 8, channels: int = 3, size: int = 32, noise: float = 1.0,
                 grid: int = 4, seed: int = 0):
        self.classes, self.channels, self.size, self.noise = classes, channels, size, noise
        self.seed = seed
        rng = np.random.default_rng([seed, 0xC1A55])
        coarse = rng.standard_normal((classes, channels, grid, grid))
        reps = -(-size // grid)
        self.prototypes = np.repeat(np.repeat(coarse, reps, axis=2), reps, axis=3)[..., :size, :size]

    def batch(self, index: int, batch_size: int) -> Batch:
        rng = np.random.default_rng([self.seed, int(index)])
        labels = rng.integers(0, self.classes, batch_size)
        noise = rng.standard_normal((batch_size, self.channels, self.size, self.size))
        return Batch(self.prototypes[labels] + self.noise * noise, labels)

    def eval_batches(self, count: int, batch_size: int) -> list[Batch]:
        return [self.batch(_EVAL_OFFSET + i, batch_size) for i in range(count)]


class TensorDataset:
    """In-memory dataset loaded from a dump file; batches cycle deterministically."""

    def __init__(self, inputs: np.ndarray, labels: np.ndarray, classes: int, holdout: float = 0.2,
                 seed: int = 0):
        self.inputs, self.labels, self.classes, self.seed = inputs, labels, classes, seed
        n_eval = int(round(len(labels) * holdout))
        self._train = np.arange(len(labels) - n_eval)
        self._eval = np.arange(len(labels) - n_eval, len(labels))

    @classmethod
    def from_file(cls, path: str | Path, **kwargs) -> "TensorDataset":
        inputs, labels, classes = load_dump(path)
        return cls(inputs, labels, classes, **kwargs)

    def batch(self, index: int, batch_size: int) -> Batch:
        rng = np.random.default_rng([self.seed, int(index)])
        idx = rng.choice(self._train, size=batch_size, replace=len(self._train) < batch_size)
        return Batch(self.inputs[idx], self.labels[idx])

    def eval_batches(self, count: int, batch_size: int) -> list[Batch]:
        chunks = [self._eval[i:i + batch_size] for i in range(0, len(self._eval), batch_size)][:count]
        return [Batch(self.inputs[c], self.labels[c]) for c in chunks]


def save_dump(path: str | Path, inputs: np.ndarray, labels: np.ndarray, classes: int) -> None:
    """Write ``magic | u32 count, C, H, W, classes | f32 inputs | i32 labels`` (little endian)."""
    n, c, h, w = inputs.shape
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<5I", n, c, h, w, classes))
        fh.write(np.ascontiguousarray(inputs, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<i4").tobytes())


def load_dump(path: str | Path) -> tuple[np.ndarray, np.ndarray, int]:
    raw = Path(path).read_bytes()
    if raw[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a dataset dump")
    n, c, h, w, classes = struct.unpack_from("<5I", raw, 8)
    off = 8 + 20
    size = n * c * h * w * 4
    inputs = np.frombuffer(raw, dtype="<f4", count=n * c * h * w, offset=off).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<i4", count=n, offset=off + size).astype(np.int64)
    if labels.size and labels.max() >= classes:
        raise ValueError(f"{path}: label id exceeds class count {classes}")
    return inputs.astype(np.float64), labels, classes
