"""Binary checkpoint format.

Layout (all integers little endian)::

    b"CASNCKPT"                      magic
    u32 version
    32 bytes                         SHA-256 digest of the space
    tensor table: weights            u32 count, then per tensor:
        u16 name length, name (utf-8), u8 dtype code, u8 ndim, ndim x u32 dims, raw payload
    tensor table: optimizer buffers  same layout
    u64 length, JSON metadata        step, RNG state, ladder state, HSS, memory bank, config

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .space import SpaceSpec

MAGIC = b"CASNCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    space_digest: str
    weights: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _write_table(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode()
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def _read_table(buf: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = bytes(buf[off:off + n]).decode()
        off += n
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=size // dt.itemsize, offset=off).reshape(shape).astype(
            dt.newbyteorder("="))
        off += size
    return out, off


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(bytes.fromhex(ckpt.space_digest))
        _write_table(fh, ckpt.weights)
        _write_table(fh, ckpt.optimizer)
        meta = json.dumps(ckpt.meta, sort_keys=True).encode()
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path, space: SpaceSpec | None = None) -> Checkpoint:
    """Read a checkpoint; when ``space`` is given its digest must match."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    buf = memoryview(path.read_bytes())
    if bytes(buf[:8]) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    digest = bytes(buf[12:44]).hex()
    if space is not None and digest != space.digest():
        raise CheckpointError(f"{path}: checkpoint was written for a different space")
    weights, off = _read_table(buf, 44)
    optimizer, off = _read_table(buf, off)
    (n,) = struct.unpack_from("<Q", buf, off)
    meta = json.loads(bytes(buf[off + 8:off + 8 + n]).decode())
    return Checkpoint(digest, weights, optimizer, meta)
