"""Binary tensor format: b"VMT1", u32 rank, rank x u32 dims, f32 LE payload."""
from __future__ import annotations

import io
import struct

import numpy as np

from ..errors import FormatError
from .tensor import Tensor

MAGIC = b"VMT1"


def tensor_to_bytes(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    if arr.ndim:
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def read_tensor(stream):
    """Read one tensor blob from a binary stream positioned at its magic."""
    magic = stream.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank)) if rank else ()
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, 4 * count)
    return Tensor(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims))


def tensor_from_bytes(blob):
    stream = io.BytesIO(blob)
    t = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after tensor payload")
    return t


def save_tensor(path, t):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def _read_exact(stream, n):
    data = stream.read(n)
    if len(data) != n:
        raise FormatError(f"truncated tensor: wanted {n} bytes, got {len(data)}")
    return data
