"""Versioned flat-file checkpoint format for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"TPCK"
    version u32
    count   u32
    then per tensor, in sorted name order:
      name_len u16, name utf-8, rank u8, extents u32 each,
      payload float64 little-endian, C order

Round-trips are bit-exact; loading verifies magic, version, and payload
sizes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ContractError

MAGIC = b"TPCK"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        out[name] = arr.copy()
    if off != len(raw):
        raise ContractError(f"{path}: trailing bytes in checkpoint")
    return out
