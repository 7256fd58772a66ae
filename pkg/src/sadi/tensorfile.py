"""Binary logits container: a 16-byte header then float32 payload.

Header: the magic ``b"SADI"`` followed by version, H and M as little-endian
uint32. Payload: H*M float32 little-endian, one head per row.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SADI"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_DTYPE = np.dtype("<f4")


class TensorFileError(ValueError):
    pass


def encode(values) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise TensorFileError(f"need a non-empty 2-D array, got shape {arr.shape}")
    H, M = arr.shape
    return _HEADER.pack(MAGIC, VERSION, H, M) + np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()


def decode(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise TensorFileError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, H, M = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFileError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise TensorFileError(f"{source}: unsupported version {version}")
    if H < 1 or M < 1:
        raise TensorFileError(f"{source}: empty shape {H}x{M}")
    expected = 4 * H * M
    payload = len(data) - _HEADER.size
    if payload != expected:
        raise TensorFileError(f"{source}: payload is {payload} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=_DTYPE, offset=_HEADER.size).reshape(H, M).astype(np.float32)


def read_tensor(path) -> np.ndarray:
    """Read a tensor file as a writable float32 ``(H, M)`` array."""
    return decode(Path(path).read_bytes(), str(path))


def write_tensor(path, values) -> None:
    Path(path).write_bytes(encode(values))
