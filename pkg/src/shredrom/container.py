"""SRD1: a minimal binary container for named float64 tensors.

Layout (all integers little-endian):

    magic   4 bytes  b"SRD1"
    version u32      format version, currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (0 = 64-bit real; the only code defined)
        ndim     u8
        dims     u64 * ndim
        payload  product(dims) * 8 bytes, row-major

Byte order is fixed little-endian so files are bit-exact across hosts.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"SRD1"
VERSION = 1
DTYPE_F64 = 0

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_TENSOR_HDR = struct.Struct("<BB")


class ContainerError(ValueError):
    """Raised for malformed, truncated or inconsistent SRD1 data."""


def write_container(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to ``path``. Order of ``tensors`` is preserved."""
    names = list(tensors)
    if len(set(names)) != len(names):
        raise ContainerError("duplicate tensor names")
    blobs = []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ContainerError(f"tensor name too long: {name!r}")
        blobs.append(
            _NAME_LEN.pack(len(encoded))
            + encoded
            + _TENSOR_HDR.pack(DTYPE_F64, a.ndim)
            + struct.pack(f"<{a.ndim}Q", *a.shape)
            + a.astype("<f8", copy=False).tobytes()
        )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


def read_container(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    """Read an SRD1 file back into an ordered name -> float64 array mapping."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported format version {version}")
    offset = _HEADER.size
    out: OrderedDict[str, np.ndarray] = OrderedDict()

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise ContainerError(f"{path}: truncated payload")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    for _ in range(count):
        (name_len,) = _NAME_LEN.unpack(take(_NAME_LEN.size))
        name = take(name_len).decode("utf-8")
        dtype_code, ndim = _TENSOR_HDR.unpack(take(_TENSOR_HDR.size))
        if dtype_code != DTYPE_F64:
            raise ContainerError(f"{path}: unknown dtype code {dtype_code}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n_elem = 1
        for d in dims:
            n_elem *= d
        payload = take(8 * n_elem)
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes")
    return out
