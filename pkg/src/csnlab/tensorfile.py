"""Binary tensor container ("CSNT").

Layout: 4-byte magic ``CSNT``, u8 version, u8 rank, little-endian u32
dims[rank], then the row-major values little-endian.  Version 1 stores
float32 (dataset payloads); version 2 stores float64 and exists so model
checkpoints round-trip parameters bit-exactly.  Both load into float64.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .errors import UsageError

MAGIC = b"CSNT"
_DTYPES = {1: "<f4", 2: "<f8"}


def write_tensor(stream, array: np.ndarray, version: int = 1) -> None:
    if version not in _DTYPES:
        raise UsageError(f"CSNT: unsupported version {version}")
    arr = np.ascontiguousarray(array)
    if arr.ndim > 255:
        raise UsageError("CSNT: rank exceeds 255")
    stream.write(MAGIC)
    stream.write(struct.pack("<BB", version, arr.ndim))
    for dim in arr.shape:
        stream.write(struct.pack("<I", dim))
    stream.write(arr.astype(_DTYPES[version]).tobytes())


def read_tensor(stream) -> np.ndarray:
    header = stream.read(6)
    if len(header) < 6 or header[:4] != MAGIC:
        raise UsageError("CSNT: bad magic")
    version, rank = struct.unpack("<BB", header[4:6])
    dtype = _DTYPES.get(version)
    if dtype is None:
        raise UsageError(f"CSNT: unsupported version {version}")
    dims_raw = stream.read(4 * rank)
    if len(dims_raw) < 4 * rank:
        raise UsageError("CSNT: truncated header")
    shape = struct.unpack(f"<{rank}I", dims_raw) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    itemsize = np.dtype(dtype).itemsize
    payload = stream.read(count * itemsize)
    if len(payload) < count * itemsize:
        raise UsageError("CSNT: truncated payload")
    values = np.frombuffer(payload, dtype=dtype, count=count)
    return values.astype(np.float64).reshape(shape)


def save_tensor(path, array: np.ndarray, version: int = 1) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array, version=version)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def tensor_bytes(array: np.ndarray, version: int = 1) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, array, version=version)
    return buf.getvalue()
