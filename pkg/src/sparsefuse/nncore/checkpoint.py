"""Binary parameter checkpoints.

Layout (little-endian)::

    magic b"SFCK" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | float32 data
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SFCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(state) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes):
    def take(n, pos):
        if pos + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        return buf[pos:pos + n], pos + n

    head, pos = take(12, 0)
    if head[:4] != MAGIC:
        raise CheckpointError("bad magic")
    version, count = struct.unpack("<II", head[4:])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state = OrderedDict()
    for _ in range(count):
        raw, pos = take(4, pos)
        (nlen,) = struct.unpack("<I", raw)
        name, pos = take(nlen, pos)
        raw, pos = take(4, pos)
        (rank,) = struct.unpack("<I", raw)
        raw, pos = take(4 * rank, pos)
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims)) if rank else 1
        raw, pos = take(4 * size, pos)
        state[name.decode("utf-8")] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return state


def save(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
