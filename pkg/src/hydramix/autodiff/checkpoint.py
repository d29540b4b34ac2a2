"""HMXW weight files.

Layout (little-endian): magic ``b"HMXW"``, version u32, tensor count u32, then
per tensor: name length u16, utf-8 name, rank u8, extents u32[rank], f32 data.
"""
from __future__ import annotations

import struct

import numpy as np

from ..errors import CheckpointError

MAGIC = b"HMXW"
VERSION = 1


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} cannot be encoded (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf):
    """Parse an HMXW byte string into an ordered ``{name: float32 array}``."""
    view = memoryview(buf)
    pos = 0

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at offset {pos}", offset=pos)
        chunk = view[pos:pos + nbytes]
        pos += nbytes
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic at offset 0, not an HMXW file", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported HMXW version {version} at offset 4", offset=4)
    out = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor name is not utf-8 at offset {start + 2}", offset=start + 2) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        count_vals = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(take(4 * count_vals, f"data of {name!r}"), dtype="<f4")
        out[name] = data.reshape(shape).astype(np.float32)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes at offset {pos}", offset=pos)
    return out


def save(path, tensors):
    with open(path, "wb") as fh:
        fh.write(dumps(tensors))


def load(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}", offset=0) from exc
    return loads(buf)
