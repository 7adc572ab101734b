"""Internal .rawvol container for synthetic volumes.

Layout (all little-endian): magic b"RVOL", u32 version, u32 rank,
u32 dims[rank], u32 dtype code (NIfTI codes: 2 uint8, 4 int16,
16 float32, 64 float64), then the raw C-order payload.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import FormatError, UnsupportedError

MAGIC = b"RVOL"
VERSION = 1
DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
CODE_FOR = {np.dtype(v).type: k for k, v in DTYPE_CODES.items()}


def write_rawvol(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.type not in CODE_FOR:
        raise UnsupportedError(f"rawvol cannot store dtype {arr.dtype}")
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<I", CODE_FOR[arr.dtype.type])
    return head + arr.astype(arr.dtype.newbyteorder("<")).tobytes()


def read_rawvol(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise FormatError(f"rawvol truncated: need at least 12 bytes, got {len(data)}")
    if data[:4] != MAGIC:
        raise FormatError(f"bad rawvol magic {data[:4]!r} at offset 0")
    version, rank = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise UnsupportedError(f"rawvol version {version} not supported")
    if not (1 <= rank <= 7):
        raise FormatError(f"rawvol rank {rank} outside [1,7] (offset 8)")
    need_head = 12 + 4 * rank + 4
    if len(data) < need_head:
        raise FormatError(
            f"rawvol truncated in header: need {need_head} bytes, got {len(data)} "
            f"({need_head - len(data)} missing)")
    dims = struct.unpack_from(f"<{rank}I", data, 12)
    (code,) = struct.unpack_from("<I", data, 12 + 4 * rank)
    if code not in DTYPE_CODES:
        raise UnsupportedError(f"rawvol dtype code {code} not supported")
    dt = np.dtype(DTYPE_CODES[code]).newbyteorder("<")
    nvox = int(np.prod(dims))
    need = need_head + nvox * dt.itemsize
    if len(data) < need:
        raise FormatError(
            f"rawvol truncated: need {need} bytes, got {len(data)} "
            f"({need - len(data)} missing)")
    return np.frombuffer(data, dtype=dt, count=nvox, offset=need_head).reshape(dims).copy()


def describe_rawvol(data: bytes) -> str:
    arr = read_rawvol(data)
    code = CODE_FOR[arr.dtype.newbyteorder("=").type]
    return "\n".join([
        f"magic={MAGIC!r}",
        f"version={VERSION}",
        f"rank={arr.ndim}",
        f"dims={list(arr.shape)}",
        f"dtype_code={code} ({arr.dtype.newbyteorder('=').name})",
    ])
