"""Localized prediction maps and slice export.

Because spatial averaging and the linear head are both linear, their
order can be exchanged: applying the head at every pre-pool location
yields a map whose spatial mean equals the global prediction. Maps are
kept at feature-map resolution (optionally nearest-upsampled by the
network stride); values are true local logits, never smoothed.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .architecture import Model, compute_receptive_field, forward, total_stride
from .errors import ConfigError, ShapeError
from .tensor import Tensor


@dataclass
class PredictionMap:
    local_logits: Tensor    # [output_dim, d, h, w]
    global_logits: Tensor   # [output_dim]
    stride: int
    rf: int
    task: str               # "age" | "sex"

    def mean_residual(self) -> float:
        """|mean(local) - global| / max(1, |global|), the exchange identity."""
        mean_local = self.local_logits.data.reshape(self.local_logits.shape[0], -1).mean(axis=1)
        g = self.global_logits.data
        return float(np.max(np.abs(mean_local - g) / np.maximum(1.0, np.abs(g))))


def local_predictions(model: Model, x: Tensor) -> PredictionMap:
    """Per-location logits for a single volume [1,1,D,H,W].

    The global logits are recomputed through the ordinary forward path
    (pool then head) rather than derived from the map, so the exchange
    identity remains an end-to-end check.
    """
    if x.data.ndim != 5 or x.shape[0] != 1 or x.shape[1] != 1:
        raise ShapeError(f"local_predictions expects [1,1,D,H,W], got {x.shape}")
    logits, feats = forward(model, x, keep_features=True)
    f = feats.data[0].reshape(model.feature_dim, -1)          # [F, L]
    local = model.head_weight.data @ f + model.head_bias.data[:, None]
    d, h, w = feats.shape[2:]
    _, rf = compute_receptive_field(model.config)
    task = "age" if model.output_dim == 1 else "sex"
    return PredictionMap(
        local_logits=Tensor(local.reshape(model.output_dim, d, h, w)),
        global_logits=Tensor(logits.data[0]),
        stride=total_stride(model.config),
        rf=rf,
        task=task,
    )


def to_probability_map(pmap: PredictionMap) -> Tensor:
    """Per-location softmax probability of class 1 (female), in [0,1]."""
    if pmap.task != "sex" or pmap.local_logits.shape[0] != 2:
        raise ConfigError(
            f"probability maps need the 2-logit sex head, got task {pmap.task!r} "
            f"with {pmap.local_logits.shape[0]} logit(s)")
    z = pmap.local_logits.data
    zmax = z.max(axis=0, keepdims=True)
    ez = np.exp(z - zmax)
    return Tensor(ez[1] / ez.sum(axis=0))


def upsample_nearest(map3d: np.ndarray, stride: int) -> np.ndarray:
    """Replicate each location into a stride^3 block (input-resolution view)."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    out = map3d
    for axis in range(3):
        out = np.repeat(out, stride, axis=axis)
    return out


def _slice3d(map3d: np.ndarray, axis: int, index) -> np.ndarray:
    if axis not in (0, 1, 2):
        raise ConfigError(f"axis must be 0, 1 or 2, got {axis}")
    extent = map3d.shape[axis]
    if index == "middle":
        index = extent // 2
    try:
        index = int(index)
    except (TypeError, ValueError):
        raise ConfigError(f"slice index must be an integer or 'middle', got {index!r}") from None
    if not (0 <= index < extent):
        raise ConfigError(f"slice index {index} out of bounds for axis {axis} (extent {extent})")
    return np.take(map3d, index, axis=axis)


def export_slices(map3d: np.ndarray, axis: int, index, fmt: str,
                  upsample: str = "none", stride: int = 1) -> bytes:
    """One slice of a 3-D map as CSV or binary PGM bytes.

    CSV is RFC-4180 style (comma separated, CRLF rows, '.' decimal) with
    full-precision values. PGM (P5) is min-max normalized to 8 bits with
    the bounds recorded in a header comment; a constant slice is flagged
    degenerate and rendered mid-gray.
    """
    if upsample not in ("none", "nearest"):
        raise ConfigError(f"upsample must be 'none' or 'nearest', got {upsample!r}")
    if upsample == "nearest":
        map3d = upsample_nearest(map3d, stride)
    sl = _slice3d(map3d, axis, index)

    if fmt == "csv":
        buf = io.StringIO()
        for row in sl:
            buf.write(",".join(repr(float(v)) for v in row))
            buf.write("\r\n")
        return buf.getvalue().encode()
    if fmt == "pgm":
        lo, hi = float(sl.min()), float(sl.max())
        if hi > lo:
            pixels = np.round((sl - lo) / (hi - lo) * 255.0).astype(np.uint8)
            comment = f"# min={lo!r} max={hi!r}\n"
        else:
            pixels = np.full(sl.shape, 128, dtype=np.uint8)
            comment = f"# min={lo!r} max={hi!r} degenerate\n"
        head = f"P5\n{comment}{sl.shape[1]} {sl.shape[0]}\n255\n"
        return head.encode() + pixels.tobytes()
    raise ConfigError(f"format must be 'csv' or 'pgm', got {fmt!r}")
