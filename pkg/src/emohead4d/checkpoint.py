"""Binary checkpoint container.

Layout (all integers little-endian ``uint32``)::

    magic      4 bytes  b"EH4C"
    version    uint32   (currently 1)
    meta_len   uint32   length of the UTF-8 JSON metadata block
    meta       bytes
    count      uint32   number of tensors
    count x:
        name_len uint32
        name     bytes (UTF-8)
        rank     uint32
        dims     rank x uint32
        data     prod(dims) x float32 little-endian, C order

Metadata carries the seed, configuration and anything non-numeric.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EH4C"
VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None):
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", VERSION)
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(buf))


def load_checkpoint(path):
    """Returns ``(tensors, meta)``; tensors come back as float64 arrays."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    (mlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta = json.loads(data[off:off + mlen].decode("utf-8"))
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = arr.astype(np.float64)
    return tensors, meta
