"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic        4 bytes  b"EMDT"
    version      u32      currently 1
    entry_count  u32
    entry * entry_count:
        name_len u32
        name     name_len bytes, UTF-8
        rank     u32
        dims     rank * u64
        dtype    u8       tag from DTYPE_TAGS
        payload  prod(dims) * itemsize bytes, row-major, little-endian

Entries are written in the order given; names must be unique.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CheckpointError

MAGIC = b"EMDT"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


def _tag(arr: np.ndarray) -> int:
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    try:
        return _TAG_OF[np.dtype(dt)]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for checkpoint") from None


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        tag = _tag(arr)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<B", tag))
        chunks.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(chunks)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic bytes")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, view, pos)
        pos += size
        return values

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<I")
        if pos + name_len > len(view):
            raise CheckpointError("truncated checkpoint")
        name = bytes(view[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<B")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{name}: unknown dtype tag {tag}")
        dtype = DTYPE_TAGS[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"{name}: truncated payload")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype=dtype).reshape(dims).copy()
        pos += nbytes
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        out[name] = arr
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def save(path: str | os.PathLike, entries: Mapping[str, np.ndarray]) -> None:
    """Write atomically: a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(entries)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
