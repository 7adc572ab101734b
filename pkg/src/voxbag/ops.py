"""Forward operations with backward rules for the tensor engine.

Shapes follow the NCDHW layout for 5-D activations. All reductions use
numpy's fixed pairwise order except :func:`global_avg_pool`, which sums
with ``math.fsum`` so the pooled value is exact and therefore invariant
under spatial permutation of the locations being averaged.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError
from .tensor import Tensor, check_same_dtype, record


def _as5d(x: Tensor, opname: str) -> None:
    if x.data.ndim != 5:
        raise ShapeError(f"{opname} expects a 5-D [N,C,D,H,W] tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# convolution

def _im2col(xp: np.ndarray, k: int, stride: int):
    """[N,C,Dp,Hp,Wp] (already padded) -> ([N, C*k^3, L], out spatial dims)."""
    v = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    v = v[:, :, ::stride, ::stride, ::stride]
    n, c, do, ho, wo = v.shape[:5]
    col = np.ascontiguousarray(v.transpose(0, 1, 5, 6, 7, 2, 3, 4))
    return col.reshape(n, c * k * k * k, do * ho * wo), (do, ho, wo)


def _col2im(gcol: np.ndarray, padded_shape, k: int, stride: int, out_dims) -> np.ndarray:
    """Scatter-add [N, C*k^3, L] column gradients back to the padded input."""
    n, c = padded_shape[0], padded_shape[1]
    do, ho, wo = out_dims
    gx = np.zeros(padded_shape, dtype=gcol.dtype)
    gc = gcol.reshape(n, c, k, k, k, do, ho, wo)
    for i in range(k):
        for j in range(k):
            for l in range(k):
                gx[:, :, i:i + stride * do:stride,
                   j:j + stride * ho:stride,
                   l:l + stride * wo:stride] += gc[:, :, i, j, l]
    return gx


def conv3d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """3-D cross-correlation with zero padding.

    x: [N,C,D,H,W]; weight: [O,C,k,k,k] with odd k; bias: [O] or None.
    Output spatial extent is floor((D + 2*padding - k) / stride) + 1.
    """
    _as5d(x, "conv3d")
    if weight.data.ndim != 5 or weight.shape[2] != weight.shape[3] or weight.shape[3] != weight.shape[4]:
        raise ShapeError(f"conv3d weight must be [O,C,k,k,k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ConfigError(f"conv3d kernel size must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"conv3d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"conv3d padding must be >= 0, got {padding}")
    n, c, d, h, w = x.shape
    o = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv3d channel mismatch: input has {c}, weight expects {weight.shape[1]}")
    if min(d, h, w) + 2 * padding < k:
        raise ShapeError(f"conv3d input {x.shape} too small for kernel {k} with padding {padding}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv3d bias must be [{o}], got {bias.shape}")
    check_same_dtype(*([x, weight] + ([bias] if bias is not None else [])))

    if padding > 0:
        p = padding
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    else:
        xp = x.data

    w2 = weight.data.reshape(o, -1)
    if k == 1:
        xs = xp[:, :, ::stride, ::stride, ::stride]
        do, ho, wo = xs.shape[2:]
        col = np.ascontiguousarray(xs).reshape(n, c, do * ho * wo)
    else:
        col, (do, ho, wo) = _im2col(xp, k, stride)
    out = np.matmul(w2, col)
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(n, o, do, ho, wo)

    inputs = [x, weight] + ([bias] if bias is not None else [])

    def bwd(gout: np.ndarray):
        g = gout.reshape(n, o, -1)
        gw = np.matmul(g, col.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        gb = g.sum(axis=(0, 2)) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcol = np.matmul(w2.T, g)
            if k == 1:
                gxp = np.zeros_like(xp)
                gxp[:, :, ::stride, ::stride, ::stride] = gcol.reshape(n, c, do, ho, wo)
            else:
                gxp = _col2im(gcol, xp.shape, k, stride, (do, ho, wo))
            if padding > 0:
                gx = gxp[:, :, padding:padding + d, padding:padding + h, padding:padding + w]
            else:
                gx = gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return record("conv3d", inputs, out, bwd)


# ---------------------------------------------------------------------------
# normalization

def instance_norm3d(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
                    detach_stats: bool = False) -> Tensor:
    """Per-(sample, channel) normalization over the D*H*W voxels.

    Uses population variance. With ``detach_stats`` the backward pass
    treats the per-instance mean/variance as constants, which restricts
    gradient flow to the convolutional pathway; forward values are
    identical either way.
    """
    _as5d(x, "instance_norm3d")
    if eps <= 0:
        raise ConfigError(f"instance_norm3d eps must be > 0, got {eps}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm3d affine params must be [{c}], got {gamma.shape}/{beta.shape}")
    check_same_dtype(x, gamma, beta)

    axes = (2, 3, 4)
    mean = x.data.mean(axis=axes, keepdims=True)
    var = np.square(x.data - mean).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x.data - mean) * inv
    g5 = gamma.data.reshape(1, c, 1, 1, 1)
    out = g5 * xhat + beta.data.reshape(1, c, 1, 1, 1)

    def bwd(gout: np.ndarray):
        ggamma = (gout * xhat).sum(axis=(0, 2, 3, 4))
        gbeta = gout.sum(axis=(0, 2, 3, 4))
        gy = gout * g5
        if detach_stats:
            gx = gy * inv
        else:
            m1 = gy.mean(axis=axes, keepdims=True)
            m2 = (gy * xhat).mean(axis=axes, keepdims=True)
            gx = inv * (gy - m1 - xhat * m2)
        return [gx, ggamma, gbeta]

    return record("instance_norm3d", [x, gamma, beta], out, bwd)


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(gout: np.ndarray):
        return [gout * (x.data > 0)]

    return record("relu", [x], out, bwd)


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add shape mismatch: {a.shape} vs {b.shape}")
    check_same_dtype(a, b)
    out = a.data + b.data

    def bwd(gout: np.ndarray):
        return [gout, gout]

    return record("residual_add", [a, b], out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of same-shape tensors (no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    check_same_dtype(a, b)
    out = a.data * b.data

    def bwd(gout: np.ndarray):
        return [gout * b.data, gout * a.data]

    return record("mul", [a, b], out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def bwd(gout: np.ndarray):
        return [np.broadcast_to(gout, x.shape).astype(x.dtype)]

    return record("sum_all", [x], out, bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: x [N,F] @ weight [K,F]^T + bias [K] -> [N,K]."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D x and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear feature mismatch: x has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must be [{weight.shape[0]}], got {bias.shape}")
    check_same_dtype(x, weight, bias)
    out = x.data @ weight.data.T + bias.data

    def bwd(gout: np.ndarray):
        return [gout @ weight.data, gout.T @ x.data, gout.sum(axis=0)]

    return record("linear", [x, weight, bias], out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial locations per (n, c): [N,C,D,H,W] -> [N,C].

    Summation uses ``math.fsum`` (exactly rounded), so the result does not
    depend on the order of locations.
    """
    _as5d(x, "global_avg_pool")
    n, c = x.shape[:2]
    loc = x.data.reshape(n, c, -1)
    nloc = loc.shape[2]
    out = np.empty((n, c), dtype=x.dtype)
    loc64 = loc.astype(np.float64, copy=False)
    for i in range(n):
        for j in range(c):
            out[i, j] = math.fsum(loc64[i, j].tolist()) / nloc

    def bwd(gout: np.ndarray):
        g = np.broadcast_to(gout[:, :, None, None, None] / nloc, x.shape)
        return [g.astype(x.dtype)]

    return record("global_avg_pool", [x], out, bwd)


# ---------------------------------------------------------------------------
# losses

def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    lab = np.asarray(labels)
    if lab.shape != (n,):
        raise ShapeError(f"labels must be [{n}], got {lab.shape}")
    if lab.min() < 0 or lab.max() >= k:
        raise DataError(f"label out of range [0,{k}): {lab.min()}..{lab.max()}")
    lab = lab.astype(np.int64)

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(ez.sum(axis=1, keepdims=True))
    out = np.asarray(-logp[np.arange(n), lab].mean(), dtype=logits.dtype)

    def bwd(gout: np.ndarray):
        g = p.copy()
        g[np.arange(n), lab] -= 1.0
        return [gout * g.astype(logits.dtype) / n]

    return record("softmax_cross_entropy", [logits], out, bwd)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over the batch of squared error."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    check_same_dtype(pred, target)
    diff = pred.data - target.data
    out = np.asarray(np.square(diff).mean(), dtype=pred.dtype)
    scale = 2.0 / diff.size

    def bwd(gout: np.ndarray):
        g = (gout * scale) * diff
        return [g, -g]

    return record("mse_loss", [pred, target], out, bwd)
