"""Checkpoint file format: bit-exact round trips, corruption detection."""

import numpy as np
import pytest

from toporl.errors import ContractError
from toporl.numcore import load_tensors, save_tensors


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "emb.tok": rng.normal(size=(17, 5)),
        "layer0.w": rng.normal(size=(5, 5)) * 1e-9,
        "scalar": np.asarray(np.pi),
        "vector": np.array([1.0, -0.0, np.finfo(np.float64).tiny]),
    }
    path = tmp_path / "ck.tpck"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        assert np.array_equal(
            loaded[name].view(np.uint64), np.asarray(arr, dtype=np.float64).view(np.uint64)
        )


def test_save_is_deterministic_bytes(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.ones(4)}
    p1, p2 = tmp_path / "one", tmp_path / "two"
    save_tensors(p1, tensors)
    save_tensors(p2, dict(reversed(list(tensors.items()))))
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ContractError):
        load_tensors(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "ck"
    save_tensors(path, {"w": np.ones((3, 3))})
    raw = path.read_bytes()
    path.write_bytes(raw + b"\x00")
    with pytest.raises(ContractError):
        load_tensors(path)
