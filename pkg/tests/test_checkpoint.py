import struct

import numpy as np
import pytest

from casnas.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def sample_ckpt(space):
    rng = np.random.default_rng(0)
    return Checkpoint(
        space.digest(),
        {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(5)},
        {"a.w": np.zeros((3, 4), np.float32)},
        {"step": 7, "bank": [[1, "x"]], "rng": {"state": 2**70}},
    )


class TestRoundtrip:
    def test_exact(self, micro, tmp_path):
        ck = sample_ckpt(micro)
        save_checkpoint(tmp_path / "c.bin", ck)
        back = load_checkpoint(tmp_path / "c.bin", micro)
        assert back.space_digest == ck.space_digest
        assert back.meta == ck.meta
        for src, dst in ((ck.weights, back.weights), (ck.optimizer, back.optimizer)):
            assert list(src) == list(dst)
            for name in src:
                assert dst[name].dtype == src[name].dtype
                assert np.array_equal(dst[name], src[name])

    def test_loaded_arrays_writable(self, micro, tmp_path):
        save_checkpoint(tmp_path / "c.bin", sample_ckpt(micro))
        back = load_checkpoint(tmp_path / "c.bin")
        back.weights["b"] += 1.0

    def test_empty_tables(self, micro, tmp_path):
        save_checkpoint(tmp_path / "c.bin", Checkpoint(micro.digest(), {}))
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.weights == {} and back.optimizer == {} and back.meta == {}

    def test_no_temp_left(self, micro, tmp_path):
        save_checkpoint(tmp_path / "c.bin", sample_ckpt(micro))
        assert [p.name for p in tmp_path.iterdir()] == ["c.bin"]


class TestErrors:
    def test_digest_mismatch(self, micro, evit, tmp_path):
        save_checkpoint(tmp_path / "c.bin", sample_ckpt(micro))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin", evit)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTACKPT" + bytes(64))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_bad_version(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(MAGIC + struct.pack("<I", 99) + bytes(64))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "c.bin")

    def test_unsupported_dtype(self, micro, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(tmp_path / "c.bin", Checkpoint(micro.digest(), {"i": np.arange(3)}))
