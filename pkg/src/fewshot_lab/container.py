"""Little-endian binary tensor container ("FSL1").

Layout: magic ``FSL1``, u32 format version, then a stream of records
sorted by name, each:

    u32 name length, UTF-8 name,
    u8 dtype code (0 = float64, 1 = raw bytes),
    u8 rank, rank x u64 dims,
    payload (row-major f64 values, or the raw bytes).

Saving the result of a load reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"FSL1"
VERSION = 1
DTYPE_F64 = 0
DTYPE_BYTES = 1


def save_records(path, records):
    """Write a name -> (float ndarray | bytes) mapping."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for name in sorted(records):
        value = records[name]
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        if isinstance(value, (bytes, bytearray)):
            blob += struct.pack("<BB", DTYPE_BYTES, 1)
            blob += struct.pack("<Q", len(value))
            blob += bytes(value)
        else:
            arr = np.asarray(value, dtype="<f8")
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)  # preserves rank-0 via asarray above
            rank = arr.ndim
            if rank > 255:
                raise ContractError(f"record {name!r}: rank {rank} exceeds format limit")
            blob += struct.pack("<BB", DTYPE_F64, rank)
            for dim in arr.shape:
                blob += struct.pack("<Q", dim)
            blob += arr.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_records(path):
    """Read a container back into a name -> (ndarray | bytes) dict."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContractError(f"{path}: not a tensor container (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported container version {version}")
    out = {}
    offset = 8
    total = len(data)
    while offset < total:
        (name_len,) = struct.unpack_from("<I", data, offset)
        offset += 4
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        dtype, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}Q", data, offset)
        offset += 8 * rank
        if dtype == DTYPE_BYTES:
            (nbytes,) = dims
            out[name] = data[offset:offset + nbytes]
            offset += nbytes
        elif dtype == DTYPE_F64:
            count = 1
            for dim in dims:
                count *= dim
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
            out[name] = arr.reshape(dims).copy()
            offset += 8 * count
        else:
            raise ContractError(f"{path}: unknown dtype code {dtype} in record {name!r}")
    return out
