"""RAMT raw tensor encoding.

Layout: ``RAMT`` magic, u32 version, u8 dtype code (0 = f64), u8 rank,
rank x u32 dims, then the row-major payload, all little-endian.
"""

import struct

import numpy as np

from ..errors import BadMagic, CorruptPayload, VersionMismatch

MAGIC = b"RAMT"
VERSION = 1
DTYPE_F64 = 0


def encode_tensor(arr):
    arr = np.asarray(getattr(arr, "data", arr), dtype="<f8", order="C")
    head = MAGIC + struct.pack("<IBB", VERSION, DTYPE_F64, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor starting at ``offset``; returns (array, next_offset)."""
    end = offset + 10
    if len(buf) < end:
        raise CorruptPayload("truncated RAMT header")
    if buf[offset:offset + 4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {bytes(buf[offset:offset + 4])!r}")
    version, dtype, rank = struct.unpack_from("<IBB", buf, offset + 4)
    if version != VERSION:
        raise VersionMismatch(f"RAMT version {version}, expected {VERSION}")
    if dtype != DTYPE_F64:
        raise CorruptPayload(f"unsupported dtype code {dtype}")
    if len(buf) < end + 4 * rank:
        raise CorruptPayload("truncated RAMT dims")
    shape = struct.unpack_from(f"<{rank}I", buf, end)
    end += 4 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    if len(buf) < end + nbytes:
        raise CorruptPayload("truncated RAMT payload")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=end).astype(np.float64)
    return arr.reshape(shape), end + nbytes


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        fh.write(encode_tensor(arr))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptPayload(f"{len(buf) - end} trailing bytes after tensor")
    return arr
