import struct

import numpy as np
import pytest

from checkpoint_manager import MAGIC, Checkpoint, CheckpointManager
from errors import FormatError


@pytest.fixture
def checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        params={
            "enc.0.weight": rng.standard_normal((4, 1, 3, 3, 3)).astype(np.float32),
            "enc.0.bias": np.zeros(4, dtype=np.float32),
            "head.0.weight": rng.standard_normal((32, 8)).astype(np.float32),
        },
        meta={"kind": "contrastive", "channels": [4], "temperature": 0.05},
    )


class TestCheckpointManager:

    def test_save_then_load_is_exact(self, tmp_path, checkpoint):
        path = CheckpointManager.save(checkpoint, tmp_path / "ckpt" / "model.ckpt")
        loaded = CheckpointManager.load(path)
        assert loaded.names() == checkpoint.names()
        assert loaded.meta == checkpoint.meta
        for name, value in checkpoint.params.items():
            assert loaded.params[name].dtype == np.float32
            np.testing.assert_array_equal(loaded.params[name], value)

    def test_file_starts_with_magic(self, tmp_path, checkpoint):
        path = CheckpointManager.save(checkpoint, tmp_path / "model.ckpt")
        raw = path.read_bytes()
        assert raw[:8] == MAGIC
        (header_len,) = struct.unpack("<Q", raw[8:16])
        payload = sum(v.size for v in checkpoint.params.values()) * 4
        assert len(raw) == 16 + header_len + payload

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
        with pytest.raises(FormatError):
            CheckpointManager.load(path)

    def test_truncated_payload(self, tmp_path, checkpoint):
        path = CheckpointManager.save(checkpoint, tmp_path / "model.ckpt")
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(FormatError):
            CheckpointManager.load(path)

    def test_header_length_past_end(self, tmp_path):
        path = tmp_path / "short.ckpt"
        path.write_bytes(MAGIC + struct.pack("<Q", 1_000))
        with pytest.raises(FormatError):
            CheckpointManager.load(path)

    def test_garbled_header(self, tmp_path):
        header = b"{not json"
        path = tmp_path / "garbled.ckpt"
        path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
        with pytest.raises(FormatError):
            CheckpointManager.load(path)

    def test_format_error_exit_code(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        with pytest.raises(FormatError) as info:
            CheckpointManager.load(path)
        assert info.value.exit_code == 2
