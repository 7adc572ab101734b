"""Versioned little-endian binary checkpoints.

Layout: magic b"VBCK", u32 version, u32 JSON length, meta JSON (config,
task, epoch, seed, best metric, optimizer step counter, rng scheme),
u32 array count, then named arrays as
(u16 name length, name, u8 dtype code, u8 rank, u32 dims..., payload).
Parameter and Adam moment arrays round-trip bit-exactly, so training
resumed from a checkpoint reproduces an uninterrupted run.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .architecture import BagNetConfig, Model, build_bagnet3d
from .errors import FormatError, UnsupportedError
from .optim import AdamState

MAGIC = b"VBCK"
VERSION = 1
_DTYPE_CODES = {np.float32: 16, np.float64: 64}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    code = _DTYPE_CODES[arr.dtype.type]
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb
    head += struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"checkpoint truncated at offset {self.pos}: need {n} more bytes, "
                f"have {len(self.data) - self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def _read_array(r: _Reader):
    (nlen,) = r.unpack("<H")
    name = r.take(nlen).decode()
    code, rank = r.unpack("<BB")
    if code not in _CODE_DTYPES:
        raise UnsupportedError(f"checkpoint array {name!r} has dtype code {code}")
    dims = r.unpack(f"<{rank}I")
    dt = np.dtype(_CODE_DTYPES[code]).newbyteorder("<")
    nbytes = int(np.prod(dims)) * dt.itemsize
    arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(_CODE_DTYPES[code])
    return name, arr


def save_checkpoint(path, model: Model, state: AdamState, meta: dict) -> None:
    """Write model parameters, Adam moments, and run metadata."""
    meta = dict(meta)
    meta["config"] = json.loads(model.config.to_json())
    meta["config_hash"] = model.config_hash
    meta["output_dim"] = model.output_dim
    meta["precision"] = model.precision
    meta["adam_t"] = state.t
    blob = json.dumps(meta, sort_keys=True).encode()

    arrays = []
    for name, t, _ in model.parameters():
        arrays.append((f"param/{name}", t.data))
    for name in sorted(state.m):
        arrays.append((f"adam_m/{name}", state.m[name]))
        arrays.append((f"adam_v/{name}", state.v[name]))

    out = MAGIC + struct.pack("<II", VERSION, len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        out += _pack_array(name, arr)
    with open(path, "wb") as f:
        f.write(out)


def load_checkpoint(path):
    """Read a checkpoint -> (model, AdamState, meta dict)."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r} at offset 0")
    version, jlen = r.unpack("<II")
    if version != VERSION:
        raise UnsupportedError(f"checkpoint version {version} not supported")
    meta = json.loads(r.take(jlen).decode())

    config = BagNetConfig.from_json(json.dumps(meta["config"]))
    dtype = np.float64 if meta.get("precision") == "float64" else np.float32
    model = build_bagnet3d(config, meta["output_dim"], seed=0, dtype=dtype)

    (count,) = r.unpack("<I")
    params, state = {}, AdamState()
    for _ in range(count):
        name, arr = _read_array(r)
        kind, pname = name.split("/", 1)
        if kind == "param":
            params[pname] = arr
        elif kind == "adam_m":
            state.m[pname] = arr
        elif kind == "adam_v":
            state.v[pname] = arr
        else:
            raise FormatError(f"unknown checkpoint array kind {kind!r}")
    state.t = int(meta.get("adam_t", 0))

    from .tensor import Tensor
    expected = {n for n, _, _ in model.parameters()}
    if set(params) != expected:
        missing = sorted(expected - set(params))[:3]
        raise FormatError(f"checkpoint parameter set mismatch (e.g. missing {missing})")
    model.set_parameters({k: Tensor(v, requires_grad=True) for k, v in params.items()})
    return model, state, meta
