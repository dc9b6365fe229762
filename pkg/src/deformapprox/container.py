"""Binary container used by checkpoint and model bundle files.

Layout (little-endian throughout):

    bytes 0..3   magic (4 ASCII bytes, e.g. ``DAXM``)
    bytes 4..5   format version, uint16
    bytes 6..9   header length H, uint32
    bytes 10..   JSON header, H bytes, UTF-8
    then         raw array payloads, C order, concatenated in manifest order

The JSON header has two keys: ``meta`` (free-form JSON metadata) and
``arrays`` (ordered manifest of ``{"name", "dtype", "shape"}`` entries).
The header is serialized with sorted keys and no whitespace so identical
content always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_PREFIX = struct.Struct("<4sHI")


class ContainerError(ValueError):
    """Raised for bad magic, version mismatch, or truncated files."""


def write_container(path, magic: bytes, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) plus ``meta`` under the given magic.

    Array insertion order is preserved and becomes the payload order.
    """
    if len(magic) != 4:
        raise ValueError(f"magic must be 4 bytes, got {magic!r}")
    manifest = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder not in ("<", "=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = json.dumps(
        {"meta": meta, "arrays": manifest}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(magic, FORMAT_VERSION, len(header)))
        fh.write(header)
        for chunk in payloads:
            fh.write(chunk)


def read_container(path, magic: bytes):
    """Read a container file, returning ``(meta, arrays)``.

    Raises ContainerError on wrong magic, unsupported version, or a file
    shorter than its manifest promises.
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: file too short for container prefix")
    got_magic, version, header_len = _PREFIX.unpack_from(data)
    if got_magic != magic:
        raise ContainerError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    header_end = _PREFIX.size + header_len
    if len(data) < header_end:
        raise ContainerError(f"{path}: truncated header")
    header = json.loads(data[_PREFIX.size:header_end].decode("utf-8"))
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise ContainerError(f"{path}: truncated payload for array {entry['name']!r}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    return header["meta"], arrays
