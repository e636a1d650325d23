"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"CAPECKPT"                      magic
    u32 version                      currently 1
    u32 n, n bytes                   UTF-8 JSON metadata (config, vocabulary, ...)
    u32 count                        number of parameter records, then per record:
        u16 n, n bytes               parameter name (UTF-8)
        u8 ndim, ndim x u64          shape
        prod(shape) x f64            row-major data
"""

import json
import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"CAPECKPT"
VERSION = 1


def dumps(params, metadata=None):
    """Serialize an ordered ``{name: array}`` mapping to bytes."""
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def loads(buf):
    """Inverse of :func:`dumps`; returns ``(params, metadata)``."""
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"checkpoint truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a caperec checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    metadata = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(bytes(take(8 * size)), dtype="<f8").astype(np.float64)
        params[name] = data.reshape(shape)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after last record")
    return params, metadata


def save(path, params, metadata=None):
    with open(path, "wb") as fh:
        fh.write(dumps(params, metadata))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
