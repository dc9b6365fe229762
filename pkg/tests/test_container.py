"""Binary container: round trips, byte stability, and corruption errors."""

import struct

import numpy as np
import pytest

from deformapprox.container import ContainerError, read_container, write_container

MAGIC = b"DAXT"


def _sample_arrays():
    return {
        "a": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b": np.array([1.5, -2.5]),
        "ints": np.array([[7, -1], [0, 3]], dtype=np.int64),
        "empty": np.zeros((0, 4), dtype=np.float64),
    }


def test_round_trip_meta_and_arrays(tmp_path):
    path = tmp_path / "c.bin"
    meta = {"kind": "test", "n": 3, "nested": {"x": [1, 2]}}
    write_container(path, MAGIC, meta, _sample_arrays())
    meta2, arrays2 = read_container(path, MAGIC)
    assert meta2 == meta
    assert set(arrays2) == set(_sample_arrays())
    for name, arr in _sample_arrays().items():
        assert arrays2[name].dtype == arr.dtype
        assert arrays2[name].shape == arr.shape
        np.testing.assert_array_equal(arrays2[name], arr)


def test_identical_content_identical_bytes(tmp_path):
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    write_container(p1, MAGIC, {"v": 1}, _sample_arrays())
    write_container(p2, MAGIC, {"v": 1}, _sample_arrays())
    assert p1.read_bytes() == p2.read_bytes()


def test_payload_order_follows_insertion_order(tmp_path):
    path = tmp_path / "c.bin"
    arrays = {"z": np.array([1.0]), "a": np.array([2.0])}
    write_container(path, MAGIC, {}, arrays)
    _, back = read_container(path, MAGIC)
    assert list(back) == ["z", "a"]


def test_wrong_magic_rejected(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, {}, {"a": np.zeros(2)})
    with pytest.raises(ContainerError, match="bad magic"):
        read_container(path, b"DAXB")


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "c.bin"
    header = b"{}"
    path.write_bytes(struct.pack("<4sHI", MAGIC, 99, len(header)) + header)
    with pytest.raises(ContainerError, match="version"):
        read_container(path, MAGIC)


def test_truncated_prefix_rejected(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(b"DA")
    with pytest.raises(ContainerError, match="too short"):
        read_container(path, MAGIC)


def test_truncated_header_rejected(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, {"k": 1}, {})
    data = path.read_bytes()
    path.write_bytes(data[: struct.calcsize("<4sHI") + 2])
    with pytest.raises(ContainerError, match="truncated header"):
        read_container(path, MAGIC)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "c.bin"
    write_container(path, MAGIC, {}, {"a": np.arange(100, dtype=np.float64)})
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ContainerError, match="truncated payload"):
        read_container(path, MAGIC)


def test_magic_must_be_four_bytes(tmp_path):
    with pytest.raises(ValueError, match="4 bytes"):
        write_container(tmp_path / "c.bin", b"LONGMAGIC", {}, {})


def test_non_contiguous_array_round_trips(tmp_path):
    path = tmp_path / "c.bin"
    base = np.arange(24, dtype=np.float64).reshape(4, 6)
    view = base[:, ::2]  # strided view
    write_container(path, MAGIC, {}, {"v": view})
    _, back = read_container(path, MAGIC)
    np.testing.assert_array_equal(back["v"], view)
