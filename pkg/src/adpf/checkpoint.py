"""Binary checkpoint files for named parameter sets.

Layout: 4-byte magic "ADPF", one version byte, then one record per parameter
in iteration order. Each record is a u64-LE byte length followed by the
UTF-8 name, a u64-LE rank, one u64-LE extent per axis, and the float64-LE
payload in C order. Writing the same parameters twice produces identical
bytes, so checkpoints can be compared byte-for-byte.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError, IoError
from .tensor import Tensor

MAGIC = b"ADPF"
VERSION = 1


def serialize(params) -> bytes:
    """params: mapping name -> Tensor or ndarray, in a stable order."""
    chunks = [MAGIC, bytes([VERSION])]
    for name, value in params.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        name_bytes = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<Q", arr.ndim))
        for extent in arr.shape:
            chunks.append(struct.pack("<Q", extent))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params):
    try:
        with open(path, "wb") as fh:
            fh.write(serialize(params))
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def done(self):
        return self.pos == len(self.blob)


def deserialize(blob) -> "OrderedDict[str, np.ndarray]":
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("bad checkpoint magic")
    version = r.take(1)[0]
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    params = OrderedDict()
    while not r.done():
        name_len = r.u64()
        name = r.take(name_len).decode("utf-8")
        rank = r.u64()
        shape = tuple(r.u64() for _ in range(rank))
        count = 1
        for extent in shape:
            count *= extent
        payload = r.take(count * 8)
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if name in params:
            raise FormatError(f"duplicate parameter name {name!r}")
        params[name] = arr
    return params


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return deserialize(blob)
