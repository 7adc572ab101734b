"""Synthetic volume generation for desk-scale texture/structure experiments.

Three tasks:

* ``texture_regression`` — the target y in [0,1] sets the standard
  deviation of band-limited noise inside a spherical foreground; y is
  recoverable from the statistics of any interior patch.
* ``texture_classification`` — two classes whose noise differs in local
  statistics (variance), recoverable from any interior patch.
* ``global_structure`` — two small blobs on a noisy background; class 0
  puts both in the same octant (per-axis displacement exactly w), class 1
  in two different octants (displacement exactly w+g, with g != w). Blob
  positions come from a per-axis coordinate grid spaced so that no 9^3
  patch ever contains parts of two blobs, plus a per-sample global shift
  spanning the network stride. The two constructions are signature-matched:
  for every sample the two blobs look locally like one "low-edge" blob and
  one "high-edge" blob with identically distributed edge distances and
  stride phases, so every observable of a single patch (or of a bag of
  small patches) is class-independent by construction; only the joint
  displacement carries the label.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import ConfigError
from ..rng import substream
from .volume import SubjectMeta, Volume

TASKS = ("texture_regression", "texture_classification", "global_structure")

PATCH = 9  # patch edge the locality guarantee is stated for


@dataclass
class SyntheticSpec:
    task: str
    volume_shape: tuple = (32, 32, 32)
    n: int = 100
    seed: int = 0
    # texture tasks: noise std range (regression interpolates, classification
    # uses the two endpoints); smooth_width band-limits the noise
    sigma_range: tuple = (0.1, 0.4)
    smooth_width: int = 3
    base_intensity: float = 1.0
    # global_structure: background noise, blob cube edge and added amplitude
    noise_sigma: float = 0.25
    blob_size: int = 1
    blob_amplitude: float = 6.0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if len(self.volume_shape) != 3 or any(s < 1 for s in self.volume_shape):
            raise ConfigError(f"volume_shape must be 3 positive ints, got {self.volume_shape}")
        if self.n < 1:
            raise ConfigError("sample count must be >= 1")
        if self.task.startswith("texture"):
            lo, hi = self.sigma_range
            if not (0 < lo <= hi):
                raise ConfigError(f"sigma_range must satisfy 0 < lo <= hi, got {self.sigma_range}")
            if min(self.volume_shape) < 2 * PATCH:
                raise ConfigError(
                    f"volume_shape {self.volume_shape} too small for interior "
                    f"{PATCH}^3 patches inside the spherical mask")
            if self.smooth_width < 1 or self.smooth_width % 2 == 0:
                raise ConfigError("smooth_width must be an odd positive int")
        else:
            if self.blob_size < 1:
                raise ConfigError("blob_size must be >= 1")
            slot_grid(self.volume_shape, self.blob_size)  # raises if too small


# ---------------------------------------------------------------------------
# texture tasks

def _box_smooth(arr: np.ndarray, width: int) -> np.ndarray:
    """Separable moving-average box filter (edge-padded)."""
    if width == 1:
        return arr
    r = width // 2
    out = arr.astype(np.float64)
    for axis in range(arr.ndim):
        padded = np.concatenate([np.take(out, [0] * r, axis=axis), out,
                                 np.take(out, [-1] * r, axis=axis)], axis=axis)
        csum = np.cumsum(padded, axis=axis)
        lead = np.take(csum, range(width - 1, padded.shape[axis]), axis=axis)
        lag = np.take(csum, range(0, padded.shape[axis] - width + 1), axis=axis)
        first = np.take(csum, [width - 1], axis=axis)
        out = np.concatenate([first, lead[tuple(
            slice(1, None) if a == axis else slice(None) for a in range(arr.ndim))] -
            lag[tuple(slice(None, -1) if a == axis else slice(None) for a in range(arr.ndim))]],
            axis=axis) / width
    return out


def sphere_mask(shape) -> np.ndarray:
    center = [(s - 1) / 2.0 for s in shape]
    radius = 0.42 * min(shape)
    zz, yy, xx = np.ogrid[:shape[0], :shape[1], :shape[2]]
    d2 = ((zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2)
    return d2 <= radius ** 2


def _texture_volume(spec: SyntheticSpec, sigma: float, rng) -> np.ndarray:
    mask = sphere_mask(spec.volume_shape)
    noise = _box_smooth(rng.standard_normal(spec.volume_shape), spec.smooth_width)
    inside = noise[mask]
    noise = noise * (sigma / inside.std())
    vox = np.where(mask, spec.base_intensity + noise, 0.0)
    return vox.astype(np.float32)


# ---------------------------------------------------------------------------
# global-structure task

SHIFT = 8  # per-sample global shift range; equals the network's total stride


def slot_grid(shape, blob_size: int):
    """Per-axis base coordinates {m, m+w, m+w+g, m+2w+g} plus shift room.

    The within-octant step ``w = 8 + blob_size`` guarantees that two
    blobs at distinct grid points are never both visible to one 9^3
    patch. The cross-half gap ``g = w + 1`` differs from ``w`` so that a
    blob pair at per-axis displacement exactly (w, w, w) occurs if and
    only if both blobs sit in the same octant: the class rule is carried
    by relative geometry alone. Every sample adds a global shift drawn
    from {0..SHIFT-1}^3, which uniformizes each blob's stride phase and
    boundary distance; the lower two grid values stay in the lower octant
    half and the upper two in the upper half for all shifts.
    """
    w = PATCH - 1 + blob_size
    g = w + 1
    span = 2 * w + g + blob_size + SHIFT - 1
    grids = []
    for extent in shape:
        if extent < span + 1:
            raise ConfigError(
                f"axis extent {extent} too small for the global_structure task "
                f"(needs >= {span + 1} for blob_size {blob_size})")
        m = (extent - span) // 2
        vals = [m, m + w, m + w + g, m + 2 * w + g]
        if vals[1] + SHIFT - 1 + blob_size > extent // 2 or vals[2] < (extent + 1) // 2:
            raise ConfigError(
                f"axis extent {extent}: slot grid does not respect the octant split")
        grids.append(vals)
    return grids


OCTANTS = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]


def structure_blob_corners(grids, label: int, octant, shift):
    """Signature-matched blob corners for one sample.

    Per axis the grid is [x0, x1, x2, x3] (x1-x0 = x3-x2 = w, x2-x1 = g).
    Class 0, octant bit b: blobs at x_{2b} and x_{2b+1} (same octant,
    displacement w). Class 1: blobs at (b ? x1 : x0) and (b ? x3 : x2)
    (octants (0,0,0) vs (1,1,1), displacement w+g). In both classes the
    first blob's per-axis value is x0 (near the low face) where b=0 and
    an interior value where b=1, and the second blob mirrors this at the
    high face, so the two blobs' local appearance statistics (boundary
    distances, stride phases after the shift) are identically distributed
    across classes; only the displacement differs.
    """
    c1, c2 = [], []
    for g, b, r in zip(grids, octant, shift):
        if label == 0:
            c1.append(g[2 * b] + r)
            c2.append(g[2 * b + 1] + r)
        else:
            c1.append(g[b] + r)
            c2.append(g[2 + b] + r)
    return tuple(c1), tuple(c2)


def _structure_volume(spec: SyntheticSpec, label: int, rng) -> np.ndarray:
    grids = slot_grid(spec.volume_shape, spec.blob_size)
    vox = spec.base_intensity + spec.noise_sigma * rng.standard_normal(spec.volume_shape)
    octant = OCTANTS[rng.integers(0, 8)]
    shift = tuple(int(v) for v in rng.integers(0, SHIFT, size=3))
    s = spec.blob_size
    for c in structure_blob_corners(grids, label, octant, shift):
        vox[c[0]:c[0] + s, c[1]:c[1] + s, c[2]:c[2] + s] += spec.blob_amplitude
    return vox.astype(np.float32)


# ---------------------------------------------------------------------------
# entry point

def generate_synthetic(spec: SyntheticSpec, indices: Optional[range] = None):
    """Volumes (with targets in ``meta``) for ``spec``; deterministic in seed.

    Each sample draws from its own substream keyed by (seed, index), so
    any subset of indices can be generated independently.
    """
    spec.validate()
    if indices is None:
        indices = range(spec.n)
    out = []
    for i in indices:
        rng = substream(spec.seed, "synth", i)
        if spec.task == "texture_regression":
            y = float(rng.uniform(0.0, 1.0))
            lo, hi = spec.sigma_range
            vox = _texture_volume(spec, lo + y * (hi - lo), rng)
            meta = SubjectMeta(age=y, sex=0, id=f"synth{i:05d}")
            vol = Volume(vox, mask=sphere_mask(spec.volume_shape), meta=meta)
        elif spec.task == "texture_classification":
            label = i % 2
            sigma = spec.sigma_range[label]
            vox = _texture_volume(spec, sigma, rng)
            meta = SubjectMeta(age=0.0, sex=label, id=f"synth{i:05d}")
            vol = Volume(vox, mask=sphere_mask(spec.volume_shape), meta=meta)
        else:
            label = i % 2
            vox = _structure_volume(spec, label, rng)
            meta = SubjectMeta(age=0.0, sex=label, id=f"synth{i:05d}")
            vol = Volume(vox, mask=np.ones(spec.volume_shape, dtype=bool), meta=meta)
        out.append(vol)
    return out
