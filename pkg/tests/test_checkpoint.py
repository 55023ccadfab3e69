"""Binary tensor container: layout and bit-exact round-trips."""

import struct

import numpy as np
import pytest

from iwin.checkpoint import MAGIC, CheckpointError, load_tensors, save_tensors


class TestRoundTrip:
    def test_bit_exact(self, tmp_path, rng):
        tensors = {
            "weights.w1": rng.standard_normal((3, 4, 5)),
            "scalar": np.array(1.0 / 3.0),
            "empty_axis": np.zeros((0, 7)),
            "unicode-名前": rng.standard_normal(11),
        }
        path = tmp_path / "t.bin"
        save_tensors(path, tensors)
        loaded = load_tensors(path)
        assert set(loaded) == set(tensors)
        for k, v in tensors.items():
            assert loaded[k].shape == v.shape
            assert loaded[k].tobytes() == v.tobytes()

    def test_double_round_trip_identical_bytes(self, tmp_path, rng):
        tensors = {"a": rng.standard_normal((8, 8))}
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_tensors(p1, tensors)
        save_tensors(p2, load_tensors(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_layout(self, tmp_path):
        path = tmp_path / "t.bin"
        save_tensors(path, {"ab": np.array([1.0, 2.0])})
        blob = path.read_bytes()
        assert blob[:8] == MAGIC
        assert struct.unpack_from("<Q", blob, 8)[0] == 1
        assert struct.unpack_from("<I", blob, 16)[0] == 2          # name length
        assert blob[20:22] == b"ab"
        assert struct.unpack_from("<I", blob, 22)[0] == 1          # rank
        assert struct.unpack_from("<Q", blob, 26)[0] == 2          # extent
        assert np.frombuffer(blob, "<f8", count=2, offset=34).tolist() == [1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_tensors(path)

    def test_trailing_garbage(self, tmp_path):
        path = tmp_path / "t.bin"
        save_tensors(path, {"a": np.zeros(1)})
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(CheckpointError):
            load_tensors(path)
