"""Self-describing little-endian binary checkpoints.

Layout:

    8 bytes   magic ``MRBLNET1``
    uint32    number of named arrays
    per array: uint16 name length, utf-8 name, uint8 ndim, uint32 dims
    payload   the arrays' float64 values, C order, in table order

Everything, including scalar hyperparameters, is stored as a named
float64 array so a checkpoint can be rebuilt without the config that
produced it.  Writes go through a temp file and atomic rename.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MRBLNET1"


class CheckpointError(Exception):
    """Unreadable checkpoint: bad magic, truncation, or a malformed table."""


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        payload.append(arr.tobytes())
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
        f.write(b"".join(payload))
    os.replace(tmp, path)


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    pos = len(MAGIC)

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated shape table")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    (count,) = take("<I")
    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (namelen,) = take("<H")
        if pos + namelen > len(blob):
            raise CheckpointError(f"{path}: truncated name entry")
        name = blob[pos : pos + namelen].decode("utf-8")
        pos += namelen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        table.append((name, tuple(shape)))

    arrays: dict[str, np.ndarray] = {}
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        size = n * 8
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated payload for array '{name}'")
        arrays[name] = np.frombuffer(blob[pos : pos + size], dtype="<f8").reshape(shape).copy()
        pos += size
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes after payload")
    return arrays
