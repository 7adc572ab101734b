"""3D bag-of-local-features networks in the ResNet-50 bottleneck shape.

The receptive field of the network is controlled purely by which
bottleneck blocks use a 3x3x3 middle convolution instead of 1x1x1
(``kernel3_pattern``). Named variants rf9/rf17/rf33 place a 3x3x3 in the
first block of the first 2/3/4 stages; rf177 places one in every block,
which with the full stage depths [3,4,6,3] recovers the receptive field
of a regular ResNet-50. :func:`compute_receptive_field` is the arbiter:
it walks the serial conv path with the standard (rf, jump) recurrence.

Downsampling happens in the middle conv of a stage's first block (3x3x3
when the pattern says so, else strided 1x1x1) with a strided 1x1x1
projection on the skip path, so skip connections never extend the
receptive field.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .rng import substream
from .tensor import Tensor

EXPANSION = 4

VARIANT_KERNEL3_STAGES = {"rf9": 2, "rf17": 3, "rf33": 4, "rf177": None}

PRESETS = {
    "paper": dict(stage_depths=[3, 4, 6, 3], stage_widths=[32, 64, 128, 256],
                  stage_strides=[2, 2, 2, 1], stem_width=32),
    "desk": dict(stage_depths=[1, 1, 1, 1], stage_widths=[8, 16, 32, 64],
                 stage_strides=[2, 2, 2, 1], stem_width=8),
}


@dataclass
class BagNetConfig:
    """Architecture description; fully determines shape, params, and RF."""

    stage_depths: list = field(default_factory=lambda: [3, 4, 6, 3])
    stage_widths: list = field(default_factory=lambda: [32, 64, 128, 256])
    stage_strides: list = field(default_factory=lambda: [2, 2, 2, 1])
    kernel3_pattern: list = field(default_factory=list)  # per-stage list of per-block bools
    stem_width: int = 32
    expansion: int = EXPANSION
    norm_eps: float = 1e-5

    def validate(self) -> None:
        n = len(self.stage_depths)
        if not (len(self.stage_widths) == len(self.stage_strides) == n):
            raise ConfigError("stage_depths/stage_widths/stage_strides lengths differ")
        if len(self.kernel3_pattern) != n:
            raise ConfigError(
                f"kernel3_pattern has {len(self.kernel3_pattern)} stages, expected {n}")
        for s, (depth, pat) in enumerate(zip(self.stage_depths, self.kernel3_pattern)):
            if len(pat) != depth:
                raise ConfigError(
                    f"kernel3_pattern stage {s} has {len(pat)} entries, expected {depth}")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ConfigError("stage depths and widths must be >= 1")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError("stage strides must be >= 1")
        if self.norm_eps <= 0:
            raise ConfigError("norm_eps must be > 0")

    def to_json(self) -> str:
        return json.dumps(
            {
                "stage_depths": list(self.stage_depths),
                "stage_widths": list(self.stage_widths),
                "stage_strides": list(self.stage_strides),
                "kernel3_pattern": [list(map(bool, p)) for p in self.kernel3_pattern],
                "stem_width": self.stem_width,
                "expansion": self.expansion,
                "norm_eps": self.norm_eps,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "BagNetConfig":
        raw = json.loads(text)
        cfg = cls(
            stage_depths=list(raw["stage_depths"]),
            stage_widths=list(raw["stage_widths"]),
            stage_strides=list(raw["stage_strides"]),
            kernel3_pattern=[list(map(bool, p)) for p in raw["kernel3_pattern"]],
            stem_width=int(raw["stem_width"]),
            expansion=int(raw.get("expansion", EXPANSION)),
            norm_eps=float(raw.get("norm_eps", 1e-5)),
        )
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def kernel3_pattern_for(variant: str, stage_depths) -> list:
    """Per-stage/per-block middle-kernel placement for a named variant."""
    if variant not in VARIANT_KERNEL3_STAGES:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(VARIANT_KERNEL3_STAGES)}")
    m = VARIANT_KERNEL3_STAGES[variant]
    if m is None:
        return [[True] * d for d in stage_depths]
    return [[(b == 0 and s < m) for b in range(d)] for s, d in enumerate(stage_depths)]


def variant_config(variant: str, preset: str = "paper") -> BagNetConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset]
    cfg = BagNetConfig(
        stage_depths=list(base["stage_depths"]),
        stage_widths=list(base["stage_widths"]),
        stage_strides=list(base["stage_strides"]),
        kernel3_pattern=kernel3_pattern_for(variant, base["stage_depths"]),
        stem_width=base["stem_width"],
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# receptive field arithmetic

def compute_receptive_field(config: BagNetConfig):
    """Walk the serial conv path with rf += (k-1)*jump; jump *= stride.

    Returns (rows, final_rf) where each row is a dict with the layer name,
    kernel, stride, and the rf/jump *after* that layer. Residual skip
    convolutions are 1x1x1 and never extend the rf, so they are omitted.
    """
    config.validate()
    rows = []
    rf, jump = 1, 1

    def step(name, k, stride):
        nonlocal rf, jump
        rf = rf + (k - 1) * jump
        jump = jump * stride
        rows.append({"layer": name, "kernel": k, "stride": stride, "rf": rf, "jump": jump})

    step("stem.conv1", 1, 1)
    step("stem.conv2", 3, 1)
    for s, depth in enumerate(config.stage_depths):
        for b in range(depth):
            stride = config.stage_strides[s] if b == 0 else 1
            k_mid = 3 if config.kernel3_pattern[s][b] else 1
            prefix = f"stage{s + 1}.block{b}"
            step(f"{prefix}.conv1", 1, 1)
            step(f"{prefix}.conv2", k_mid, stride)
            step(f"{prefix}.conv3", 1, 1)
    return rows, rf


def total_stride(config: BagNetConfig) -> int:
    s = 1
    for st in config.stage_strides:
        s *= st
    return s


# ---------------------------------------------------------------------------
# layers

class Conv3dLayer:
    def __init__(self, weight: Tensor, bias: Tensor, stride: int, padding: int):
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class InstanceNorm3dLayer:
    def __init__(self, gamma: Tensor, beta: Tensor, eps: float):
        self.gamma = gamma
        self.beta = beta
        self.eps = eps

    def __call__(self, x: Tensor, detach_stats: bool = False) -> Tensor:
        return ops.instance_norm3d(x, self.gamma, self.beta, eps=self.eps,
                                   detach_stats=detach_stats)


class BottleneckBlock:
    """1x1 -> (3x3 or 1x1, carries the stride) -> 1x1, each conv+norm+relu,
    with an identity or strided-1x1 projection skip."""

    def __init__(self, conv1, norm1, conv2, norm2, conv3, norm3, proj_conv, proj_norm, name):
        self.conv1, self.norm1 = conv1, norm1
        self.conv2, self.norm2 = conv2, norm2
        self.conv3, self.norm3 = conv3, norm3
        self.proj_conv, self.proj_norm = proj_conv, proj_norm
        self.name = name

    def __call__(self, x: Tensor, detach_stats: bool = False) -> Tensor:
        h = ops.relu(self.norm1(self.conv1(x), detach_stats))
        h = ops.relu(self.norm2(self.conv2(h), detach_stats))
        h = self.norm3(self.conv3(h), detach_stats)
        skip = x if self.proj_conv is None else self.proj_norm(self.proj_conv(x), detach_stats)
        return ops.relu(ops.residual_add(h, skip))


class Model:
    """Built network: stem, stages of bottleneck blocks, pooled linear head."""

    def __init__(self, config: BagNetConfig, output_dim: int, stem, stages,
                 head_weight: Tensor, head_bias: Tensor, feature_dim: int, precision: str):
        self.config = config
        self.output_dim = output_dim
        self.stem = stem          # (conv1, norm1, conv2, norm2)
        self.stages = stages      # list of lists of BottleneckBlock
        self.head_weight = head_weight
        self.head_bias = head_bias
        self.feature_dim = feature_dim
        self.precision = precision
        self.config_hash = config.config_hash()

    # parameter registry -----------------------------------------------------
    def parameters(self):
        """Ordered list of (name, tensor, decay) triples.

        ``decay`` marks conv/linear weights, the only tensors that L2
        regularization applies to.
        """
        out = []
        c1, n1, c2, n2 = self.stem
        out += [("stem.conv1.weight", c1.weight, True), ("stem.conv1.bias", c1.bias, False),
                ("stem.norm1.gamma", n1.gamma, False), ("stem.norm1.beta", n1.beta, False),
                ("stem.conv2.weight", c2.weight, True), ("stem.conv2.bias", c2.bias, False),
                ("stem.norm2.gamma", n2.gamma, False), ("stem.norm2.beta", n2.beta, False)]
        for si, blocks in enumerate(self.stages):
            for bi, blk in enumerate(blocks):
                p = f"stage{si + 1}.block{bi}"
                for tag, conv, norm in (("1", blk.conv1, blk.norm1),
                                        ("2", blk.conv2, blk.norm2),
                                        ("3", blk.conv3, blk.norm3)):
                    out += [(f"{p}.conv{tag}.weight", conv.weight, True),
                            (f"{p}.conv{tag}.bias", conv.bias, False),
                            (f"{p}.norm{tag}.gamma", norm.gamma, False),
                            (f"{p}.norm{tag}.beta", norm.beta, False)]
                if blk.proj_conv is not None:
                    out += [(f"{p}.proj.weight", blk.proj_conv.weight, True),
                            (f"{p}.proj.bias", blk.proj_conv.bias, False),
                            (f"{p}.proj_norm.gamma", blk.proj_norm.gamma, False),
                            (f"{p}.proj_norm.beta", blk.proj_norm.beta, False)]
        out += [("head.weight", self.head_weight, True), ("head.bias", self.head_bias, False)]
        return out

    def param_dict(self):
        return {name: t for name, t, _ in self.parameters()}

    def set_parameters(self, new: dict) -> None:
        """Swap in replacement tensors by name (functional update)."""
        c1, n1, c2, n2 = self.stem
        holders = {"stem.conv1": c1, "stem.norm1": n1, "stem.conv2": c2, "stem.norm2": n2}
        for si, blocks in enumerate(self.stages):
            for bi, blk in enumerate(blocks):
                p = f"stage{si + 1}.block{bi}"
                holders[f"{p}.conv1"], holders[f"{p}.norm1"] = blk.conv1, blk.norm1
                holders[f"{p}.conv2"], holders[f"{p}.norm2"] = blk.conv2, blk.norm2
                holders[f"{p}.conv3"], holders[f"{p}.norm3"] = blk.conv3, blk.norm3
                if blk.proj_conv is not None:
                    holders[f"{p}.proj"] = blk.proj_conv
                    holders[f"{p}.proj_norm"] = blk.proj_norm
        for name, t in new.items():
            prefix, attr = name.rsplit(".", 1)
            if prefix == "head":
                if attr == "weight":
                    self.head_weight = t
                else:
                    self.head_bias = t
                continue
            holder = holders[prefix]
            setattr(holder, {"weight": "weight", "bias": "bias",
                             "gamma": "gamma", "beta": "beta"}[attr], t)

    def astype(self, dtype) -> "Model":
        clone = build_bagnet3d(self.config, self.output_dim, seed=0)
        clone.set_parameters({k: v.astype(dtype) for k, v in self.param_dict().items()})
        clone.precision = np.dtype(dtype).name
        return clone


# ---------------------------------------------------------------------------
# building

def _he_conv(rng, o, c, k, dtype):
    fan_in = c * k ** 3
    w = rng.standard_normal((o, c, k, k, k)) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(dtype), requires_grad=True)


def build_bagnet3d(config: BagNetConfig, output_dim: int, seed: int,
                   dtype=np.float32) -> Model:
    """Deterministically initialized model for a given config and seed.

    He fan-in init for conv/linear weights, gamma=1/beta=0 for norms,
    zeros for all biases.
    """
    config.validate()
    if output_dim < 1:
        raise ConfigError(f"output_dim must be >= 1, got {output_dim}")
    rng = substream(seed, "init")
    dtype = np.dtype(dtype).type
    eps = config.norm_eps

    def conv(o, c, k, stride, padding):
        return Conv3dLayer(_he_conv(rng, o, c, k, dtype),
                           Tensor(np.zeros(o, dtype=dtype), requires_grad=True),
                           stride, padding)

    def norm(c):
        return InstanceNorm3dLayer(Tensor(np.ones(c, dtype=dtype), requires_grad=True),
                                   Tensor(np.zeros(c, dtype=dtype), requires_grad=True), eps)

    w0 = config.stem_width
    stem = (conv(w0, 1, 1, 1, 0), norm(w0), conv(w0, w0, 3, 1, 1), norm(w0))

    stages = []
    in_ch = w0
    for s, depth in enumerate(config.stage_depths):
        width = config.stage_widths[s]
        out_ch = width * config.expansion
        blocks = []
        for b in range(depth):
            stride = config.stage_strides[s] if b == 0 else 1
            k_mid = 3 if config.kernel3_pattern[s][b] else 1
            needs_proj = (b == 0)
            blk = BottleneckBlock(
                conv1=conv(width, in_ch, 1, 1, 0), norm1=norm(width),
                conv2=conv(width, width, k_mid, stride, 1 if k_mid == 3 else 0),
                norm2=norm(width),
                conv3=conv(out_ch, width, 1, 1, 0), norm3=norm(out_ch),
                proj_conv=conv(out_ch, in_ch, 1, stride, 0) if needs_proj else None,
                proj_norm=norm(out_ch) if needs_proj else None,
                name=f"stage{s + 1}.block{b}",
            )
            blocks.append(blk)
            in_ch = out_ch
        stages.append(blocks)

    feature_dim = in_ch
    head_w = rng.standard_normal((output_dim, feature_dim)) * np.sqrt(2.0 / feature_dim)
    head_weight = Tensor(head_w.astype(dtype), requires_grad=True)
    head_bias = Tensor(np.zeros(output_dim, dtype=dtype), requires_grad=True)
    return Model(config, output_dim, stem, stages, head_weight, head_bias,
                 feature_dim, np.dtype(dtype).name)


def count_params(config: BagNetConfig, output_dim: int = 1) -> int:
    """Closed-form parameter count for a built model."""
    config.validate()

    def conv_n(o, c, k):
        return o * c * k ** 3 + o

    def norm_n(c):
        return 2 * c

    w0 = config.stem_width
    total = conv_n(w0, 1, 1) + norm_n(w0) + conv_n(w0, w0, 3) + norm_n(w0)
    in_ch = w0
    for s, depth in enumerate(config.stage_depths):
        width = config.stage_widths[s]
        out_ch = width * config.expansion
        for b in range(depth):
            k_mid = 3 if config.kernel3_pattern[s][b] else 1
            total += conv_n(width, in_ch, 1) + norm_n(width)
            total += conv_n(width, width, k_mid) + norm_n(width)
            total += conv_n(out_ch, width, 1) + norm_n(out_ch)
            if b == 0:
                total += conv_n(out_ch, in_ch, 1) + norm_n(out_ch)
            in_ch = out_ch
    total += output_dim * in_ch + output_dim
    return total


# ---------------------------------------------------------------------------
# forward

def _check_min_extents(config: BagNetConfig, spatial) -> None:
    """Every stage must receive at least one full stride step of real voxels.

    Both middle-conv choices (k=3 pad=1 and k=1 pad=0) give the same
    downsampled extent (D - 1) // stride + 1, so the walk is pattern-free.
    """
    extents = list(spatial)
    for s, stride in enumerate(config.stage_strides):
        for axis, d in enumerate(extents):
            if d < stride:
                raise ShapeError(
                    f"stage{s + 1}: spatial extent {d} on axis {axis} is smaller than "
                    f"its stride {stride}; input {tuple(spatial)} is too small")
        extents = [(d - 1) // stride + 1 for d in extents]


def forward(model: Model, x: Tensor, mode: str = "eval", keep_features: bool = False,
            detach_norm_stats: bool = False):
    """Run the network: logits [N, output_dim], optionally the pre-pool map.

    ``mode`` is accepted for API symmetry but instance normalization has
    no batch statistics, so train and eval forward passes are identical.
    With ``detach_norm_stats`` the normalization statistics are treated as
    per-sample constants in the backward pass (values unchanged); this
    confines gradient flow to the convolutional pathway, whose support is
    what :func:`compute_receptive_field` describes.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 5 or x.shape[1] != 1:
        raise ShapeError(f"expected input [N,1,D,H,W], got {x.shape}")
    _check_min_extents(model.config, x.shape[2:])

    c1, n1, c2, n2 = model.stem
    try:
        h = ops.relu(n1(c1(x), detach_norm_stats))
        h = ops.relu(n2(c2(h), detach_norm_stats))
    except ShapeError as e:
        raise ShapeError(f"stem: {e}") from None
    for si, blocks in enumerate(model.stages):
        for blk in blocks:
            try:
                h = blk(h, detach_norm_stats)
            except ShapeError as e:
                raise ShapeError(f"{blk.name}: input too small ({e})") from None
    features = h
    pooled = ops.global_avg_pool(features)
    logits = ops.linear(pooled, model.head_weight, model.head_bias)
    if keep_features:
        return logits, features
    return logits


def rf_cube(config: BagNetConfig, location, input_shape):
    """Theoretical input support of one output location, clipped to bounds.

    With this architecture every conv is either 'same' (k=3, pad=1) or
    pointwise, so the center of output location p along an axis is
    exactly p * jump. Returns (lo, hi) inclusive index bounds per axis.
    """
    _, rf = compute_receptive_field(config)
    jump = total_stride(config)
    half = (rf - 1) // 2
    bounds = []
    for p, extent in zip(location, input_shape):
        center = p * jump
        bounds.append((max(0, center - half), min(extent - 1, center + half)))
    return bounds, rf


def local_logit_input_gradient(model: Model, x: Tensor, location, output_index: int = 0,
                               detach_norm_stats: bool = True) -> np.ndarray:
    """Gradient of one pre-pool local logit with respect to the input.

    The local logit at spatial location p is head_weight[k] . features[:, p]
    + head_bias[k]. Statistics of the normalization layers are detached by
    default so the gradient support matches the conv-path receptive field.
    """
    from .tensor import Tape, backward

    xin = Tensor(x.data, requires_grad=True)
    with Tape() as tape:
        _, features = forward(model, xin, keep_features=True,
                              detach_norm_stats=detach_norm_stats)
        mask = np.zeros(features.shape, dtype=features.dtype)
        d, h, w = location
        mask[0, :, d, h, w] = model.head_weight.data[output_index]
        loss = ops.sum_all(ops.mul(features, Tensor(mask)))
    backward(loss, tape)
    return xin.grad[0, 0]
