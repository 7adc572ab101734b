"""Dataset splitting, JSON manifests, and volume loading."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import DataError, FormatError
from ..rng import substream
from .nifti import parse_nifti1
from .rawvol import read_rawvol
from .volume import SubjectMeta, Volume


def split_dataset(n: int, ratios, seed: int):
    """Seeded 3-way split: sizes (floor(n*r_train), floor(n*r_val), rest).

    Returns (train, val, test) as sorted index lists; disjoint and
    exhaustive. Sizes depend only on (n, ratios), membership only on seed.
    """
    r_train, r_val = float(ratios[0]), float(ratios[1])
    if r_train <= 0 or r_val <= 0 or r_train + r_val >= 1:
        raise DataError(f"ratios must be positive with sum < 1, got {ratios}")
    if n < 3:
        raise DataError(f"need at least 3 samples to split, got {n}")
    n_train = int(n * r_train)
    n_val = int(n * r_val)
    perm = substream(seed, "split").permutation(n)
    train = sorted(int(i) for i in perm[:n_train])
    val = sorted(int(i) for i in perm[n_train:n_train + n_val])
    test = sorted(int(i) for i in perm[n_train + n_val:])
    return train, val, test


@dataclass
class ManifestEntry:
    path: str
    age: float
    sex: int
    mask_path: Optional[str] = None


def save_manifest(entries, path) -> None:
    rows = []
    for e in entries:
        row = {"path": e.path, "age": e.age, "sex": e.sex}
        if e.mask_path is not None:
            row["mask_path"] = e.mask_path
        rows.append(row)
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)
        f.write("\n")


def load_manifest(path):
    with open(path) as f:
        rows = json.load(f)
    if not isinstance(rows, list):
        raise DataError(f"manifest {path} must be a JSON list")
    out = []
    for row in rows:
        try:
            out.append(ManifestEntry(path=row["path"], age=float(row["age"]),
                                     sex=int(row["sex"]), mask_path=row.get("mask_path")))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"bad manifest row in {path}: {row} ({e})") from None
    return out


def load_volume(path, mask_path=None, meta: Optional[SubjectMeta] = None) -> Volume:
    """Read a .nii or .rawvol volume, with an optional companion mask file."""
    with open(path, "rb") as f:
        blob = f.read()
    ext = os.path.splitext(path)[1].lower()
    if ext == ".nii":
        _, vol = parse_nifti1(blob)
    elif ext == ".rawvol":
        arr = read_rawvol(blob)
        if arr.ndim != 3:
            raise DataError(f"{path}: expected a 3-D volume, got rank {arr.ndim}")
        vol = Volume(arr.astype(np.float32))
    else:
        raise FormatError(f"unrecognized volume extension {ext!r} for {path}")
    if mask_path is not None:
        with open(mask_path, "rb") as f:
            mb = f.read()
        if os.path.splitext(mask_path)[1].lower() == ".nii":
            _, mvol = parse_nifti1(mb)
            mask = mvol.voxels > 0
        else:
            mask = read_rawvol(mb) > 0
        vol = Volume(vol.voxels, vol.spacing_mm, mask, vol.meta)
    if meta is not None:
        vol.meta = meta
    return vol


def load_entry(entry: ManifestEntry, base_dir="") -> Volume:
    path = os.path.join(base_dir, entry.path)
    mask = os.path.join(base_dir, entry.mask_path) if entry.mask_path else None
    return load_volume(path, mask, SubjectMeta(age=entry.age, sex=entry.sex,
                                               id=os.path.basename(entry.path)))
