"""Volumes and the intensity/geometry transforms applied to them."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DataError, DegenerateStatsError, ShapeError


@dataclass
class SubjectMeta:
    age: float = 0.0
    sex: int = 0          # 0 male, 1 female
    id: str = ""


@dataclass
class Volume:
    """A 3-D scan: float32 voxels [D,H,W], optional mask, subject metadata."""

    voxels: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    mask: Optional[np.ndarray] = None
    meta: SubjectMeta = field(default_factory=SubjectMeta)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ShapeError(f"volume voxels must be 3-D, got {self.voxels.shape}")
        if self.mask is not None:
            self.mask = np.ascontiguousarray(self.mask, dtype=bool)
            if self.mask.shape != self.voxels.shape:
                raise ShapeError(
                    f"mask shape {self.mask.shape} != voxel shape {self.voxels.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise DataError(f"voxel spacing must be positive, got {self.spacing_mm}")

    @property
    def shape(self):
        return self.voxels.shape


def derive_mask(v: Volume) -> np.ndarray:
    """Foreground mask for skull-stripped data: voxels strictly > 0."""
    mask = v.voxels > 0
    if not mask.any():
        raise DataError("cannot derive a mask from an all-zero volume")
    return mask


def whiten(v: Volume) -> Volume:
    """Zero-mean/unit-std transform with statistics from inside the mask.

    The affine is applied to every voxel, inside and outside the mask, so
    a constant background stays constant. Population std.
    """
    mask = v.mask if v.mask is not None else derive_mask(v)
    inside = v.voxels[mask]
    if inside.size < 2:
        raise DataError(f"mask selects {inside.size} voxel(s); need at least 2")
    mean = float(inside.mean(dtype=np.float64))
    std = float(inside.std(dtype=np.float64))
    if std == 0.0:
        raise DegenerateStatsError("mask region has zero variance; cannot whiten")
    out = (v.voxels - np.float32(mean)) / np.float32(std)
    return Volume(out, v.spacing_mm, mask.copy(), v.meta)


def _pad_to_at_least(voxels: np.ndarray, shape) -> np.ndarray:
    """Symmetric zero-padding on axes where the volume is too small."""
    pads = []
    for have, want in zip(voxels.shape, shape):
        short = max(0, want - have)
        pads.append((short // 2, short - short // 2))
    if any(p != (0, 0) for p in pads):
        voxels = np.pad(voxels, pads)
    return voxels


def random_crop(v: Volume, shape, rng: np.random.Generator) -> Volume:
    """Uniformly random crop of the given shape; too-small axes are padded."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ShapeError(f"crop shape must be 3 positive ints, got {shape}")
    vox = _pad_to_at_least(v.voxels, shape)
    corner = tuple(int(rng.integers(0, d - s + 1)) for d, s in zip(vox.shape, shape))
    sl = tuple(slice(c, c + s) for c, s in zip(corner, shape))
    return Volume(vox[sl].copy(), v.spacing_mm, None, v.meta)


def center_crop(v: Volume, shape) -> Volume:
    """Deterministic centered crop (used for evaluation)."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise ShapeError(f"crop shape must be 3 positive ints, got {shape}")
    vox = _pad_to_at_least(v.voxels, shape)
    corner = tuple((d - s) // 2 for d, s in zip(vox.shape, shape))
    sl = tuple(slice(c, c + s) for c, s in zip(corner, shape))
    return Volume(vox[sl].copy(), v.spacing_mm, None, v.meta)
