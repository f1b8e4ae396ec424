"""Binary 2-D tensor container.

Layout (little-endian)::

    magic   4 bytes   b"SGT1" (float32 payload) or b"SGT2" (float64 payload)
    rows    uint32
    cols    uint32
    data    rows * cols floats, row-major

Feature matrices always use ``SGT1``. Checkpoints use ``SGT2`` so that
optimizer state and parameters round-trip bit-exactly.
"""

import struct
from typing import BinaryIO

import numpy as np

MAGIC_F32 = b"SGT1"
MAGIC_F64 = b"SGT2"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_F64: np.dtype("<f8")}
_HEADER = struct.Struct("<4sII")


class ContainerError(ValueError):
    pass


def write_tensor(fh: BinaryIO, array: np.ndarray, magic: bytes = MAGIC_F32) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise ContainerError(f"container holds 2-D tensors only, got shape {array.shape}")
    dtype = _DTYPES[magic]
    fh.write(_HEADER.pack(magic, array.shape[0], array.shape[1]))
    fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def read_tensor(fh: BinaryIO, expect_magic: bytes | None = None) -> np.ndarray:
    header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ContainerError("truncated tensor header")
    magic, rows, cols = _HEADER.unpack(header)
    if magic not in _DTYPES:
        raise ContainerError(f"bad tensor magic {magic!r}")
    if expect_magic is not None and magic != expect_magic:
        raise ContainerError(f"expected tensor magic {expect_magic!r}, found {magic!r}")
    dtype = _DTYPES[magic]
    nbytes = rows * cols * dtype.itemsize
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ContainerError(f"truncated tensor payload: wanted {nbytes} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).astype(dtype.newbyteorder("="))


def peek_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise ContainerError(f"{path}: truncated tensor header")
    magic, rows, cols = _HEADER.unpack(header)
    if magic not in _DTYPES:
        raise ContainerError(f"{path}: bad tensor magic {magic!r}")
    return rows, cols


def save_features(path, features: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, features, MAGIC_F32)


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh, MAGIC_F32)
