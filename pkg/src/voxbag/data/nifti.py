"""Minimal NIfTI-1 reader and test-fixture writer.

Single-file (.nii) volumes only: no compression, no extensions, no
NIfTI-2. Endianness is detected by checking whether sizeof_hdr reads as
348 natively or byte-swapped. Supported on-disk datatypes are uint8 (2),
int16 (4), float32 (16) and float64 (64); voxels are scaled by
scl_slope/scl_inter when the slope is nonzero and returned as float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import FormatError, UnsupportedError
from .volume import SubjectMeta, Volume

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}
BITPIX = {2: 8, 4: 16, 16: 32, 64: 64}

# (struct format, field name) for the full 348-byte header, in file order
_FIELDS = [
    ("i", "sizeof_hdr"), ("10s", "data_type"), ("18s", "db_name"),
    ("i", "extents"), ("h", "session_error"), ("b", "regular"), ("b", "dim_info"),
    ("8h", "dim"), ("f", "intent_p1"), ("f", "intent_p2"), ("f", "intent_p3"),
    ("h", "intent_code"), ("h", "datatype"), ("h", "bitpix"), ("h", "slice_start"),
    ("8f", "pixdim"), ("f", "vox_offset"), ("f", "scl_slope"), ("f", "scl_inter"),
    ("h", "slice_end"), ("b", "slice_code"), ("b", "xyzt_units"),
    ("f", "cal_max"), ("f", "cal_min"), ("f", "slice_duration"), ("f", "toffset"),
    ("i", "glmax"), ("i", "glmin"), ("80s", "descrip"), ("24s", "aux_file"),
    ("h", "qform_code"), ("h", "sform_code"),
    ("f", "quatern_b"), ("f", "quatern_c"), ("f", "quatern_d"),
    ("f", "qoffset_x"), ("f", "qoffset_y"), ("f", "qoffset_z"),
    ("4f", "srow_x"), ("4f", "srow_y"), ("4f", "srow_z"),
    ("16s", "intent_name"), ("4s", "magic"),
]
_STRUCT_FMT = "".join(f for f, _ in _FIELDS)
assert struct.calcsize("<" + _STRUCT_FMT) == HEADER_SIZE


@dataclass
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    vox_offset: int
    scl_slope: float
    scl_inter: float
    pixdim: tuple
    magic: bytes
    endianness: str  # '<' or '>'

    def describe(self) -> str:
        return "\n".join([
            f"sizeof_hdr={self.sizeof_hdr}",
            f"dim={list(self.dim)}",
            f"datatype={self.datatype}",
            f"bitpix={self.bitpix}",
            f"vox_offset={self.vox_offset}",
            f"scl_slope={self.scl_slope}",
            f"scl_inter={self.scl_inter}",
            f"pixdim={[round(p, 6) for p in self.pixdim]}",
            f"magic={self.magic!r}",
            f"endianness={'little' if self.endianness == '<' else 'big'}",
        ])


def _unpack_header(data: bytes):
    if len(data) < HEADER_SIZE:
        raise FormatError(
            f"file truncated: header needs {HEADER_SIZE} bytes, got {len(data)} "
            f"({HEADER_SIZE - len(data)} missing)")
    native = struct.unpack_from("<i", data, 0)[0]
    if native == HEADER_SIZE:
        order = "<"
    elif struct.unpack_from(">i", data, 0)[0] == HEADER_SIZE:
        order = ">"
    else:
        raise FormatError(
            f"sizeof_hdr is {native}, expected 348 in either byte order (offset 0)")
    values = struct.unpack_from(order + _STRUCT_FMT, data, 0)
    fields = {}
    i = 0
    for fmt, name in _FIELDS:
        count = int(fmt[:-1]) if len(fmt) > 1 and fmt[-1] != "s" else 1
        if fmt.endswith("s"):
            fields[name] = values[i]
            i += 1
        elif count == 1:
            fields[name] = values[i]
            i += 1
        else:
            fields[name] = tuple(values[i:i + count])
            i += count
    return fields, order


def parse_nifti1(data: bytes):
    """Parse NIfTI-1 bytes -> (NiftiHeader, Volume).

    Raises FormatError for malformed/truncated content, UnsupportedError
    for valid files outside the supported subset.
    """
    fields, order = _unpack_header(data)
    magic = fields["magic"]
    if magic not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise FormatError(f"bad magic {magic!r} at offset 344; not a NIfTI-1 file")
    if magic == MAGIC_PAIR:
        raise UnsupportedError("header/image pair files (magic 'ni1') are not supported")

    dim = fields["dim"]
    if not (1 <= dim[0] <= 7):
        raise FormatError(f"dim[0]={dim[0]} outside [1,7] (offset 40)")
    if dim[0] != 3:
        raise UnsupportedError(f"only 3-D volumes are supported, got dim[0]={dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise FormatError(f"non-positive spatial dims {dim[1:4]}")

    code = fields["datatype"]
    if code not in DTYPE_CODES:
        raise UnsupportedError(f"datatype code {code} not supported (supported: {sorted(DTYPE_CODES)})")
    if fields["bitpix"] != BITPIX[code]:
        raise FormatError(f"bitpix {fields['bitpix']} inconsistent with datatype {code}")

    vox_offset = int(fields["vox_offset"])
    if vox_offset < HEADER_SIZE + 4:
        raise FormatError(f"vox_offset {vox_offset} overlaps the header")
    dt = np.dtype(DTYPE_CODES[code]).newbyteorder(order)
    nvox = nx * ny * nz
    need = vox_offset + nvox * dt.itemsize
    if len(data) < need:
        raise FormatError(
            f"file truncated: voxel data needs {need} bytes, got {len(data)} "
            f"({need - len(data)} missing)")
    raw = np.frombuffer(data, dtype=dt, count=nvox, offset=vox_offset)
    # x varies fastest on disk; store voxels as [z, y, x] = [D, H, W]
    vox = raw.reshape((nz, ny, nx)).astype(np.float32)
    slope, inter = fields["scl_slope"], fields["scl_inter"]
    if slope != 0.0:
        vox = vox * np.float32(slope) + np.float32(inter)

    pixdim = fields["pixdim"]
    spacing = tuple(float(p) if p > 0 else 1.0 for p in (pixdim[3], pixdim[2], pixdim[1]))
    header = NiftiHeader(
        sizeof_hdr=fields["sizeof_hdr"], dim=dim, datatype=code,
        bitpix=fields["bitpix"], vox_offset=vox_offset,
        scl_slope=slope, scl_inter=inter, pixdim=pixdim,
        magic=magic, endianness=order,
    )
    return header, Volume(vox, spacing_mm=spacing, meta=SubjectMeta())


def write_nifti1(voxels: np.ndarray, spacing_mm=(1.0, 1.0, 1.0), dtype=np.float32,
                 scl_slope: float = 0.0, scl_inter: float = 0.0,
                 byteorder: str = "<") -> bytes:
    """Serialize a [D,H,W] array as a single-file NIfTI-1 blob.

    Exists for fixtures and round-trip tests; production use is read-only.
    """
    vox = np.asarray(voxels)
    if vox.ndim != 3:
        raise ValueError(f"expected 3-D voxels, got {vox.shape}")
    code = {v: k for k, v in DTYPE_CODES.items()}[np.dtype(dtype).type]
    nz, ny, nx = vox.shape

    def default_for(fmt):
        if fmt.endswith("s"):
            return b""
        count = int(fmt[:-1]) if len(fmt) > 1 else 1
        return (0,) * count if count > 1 else 0

    fields = {name: default_for(fmt) for fmt, name in _FIELDS}
    fields.update(
        sizeof_hdr=HEADER_SIZE,
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        datatype=code,
        bitpix=BITPIX[code],
        # pixdim[1..3] are (x, y, z) spacings; our spacing tuple is (z, y, x)
        pixdim=(0.0, spacing_mm[2], spacing_mm[1], spacing_mm[0], 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(HEADER_SIZE + 4),
        scl_slope=scl_slope,
        scl_inter=scl_inter,
        regular=ord("r"),
        magic=MAGIC_SINGLE,
    )
    packed = []
    for fmt, name in _FIELDS:
        v = fields[name]
        if fmt.endswith("s"):
            packed.append(v if isinstance(v, bytes) else bytes(v))
        elif len(fmt) > 1:
            packed.extend(v)
        else:
            packed.append(v)
    header = struct.pack(byteorder + _STRUCT_FMT, *packed)
    payload = np.ascontiguousarray(vox, dtype=np.dtype(dtype).newbyteorder(byteorder))
    return header + b"\x00\x00\x00\x00" + payload.tobytes()
