"""Adam with coupled L2 regularization, gradient accumulation, step decay.

The L2 term is added to the gradient before the moment updates (classic
weight decay through the loss) and by default applies only to conv and
linear weights, not to normalization affines or biases. Accumulated
gradients are averaged, not summed, so the learning rate keeps its
meaning regardless of the accumulation count. Both choices are flags.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericsError


@dataclass
class AdamHyper:
    eta: float = 1e-3
    eps: float = 1e-5
    l2: float = 1e-4          # JSON key "lambda"
    beta1: float = 0.9
    beta2: float = 0.999
    decay_norm_params: bool = False

    def validate(self) -> None:
        if self.eta <= 0 or self.eps <= 0 or self.l2 < 0:
            raise ConfigError("eta and eps must be > 0, lambda >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")


class AdamState:
    """First/second moment accumulators per parameter plus a step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def ensure(self, name: str, like: np.ndarray) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(like)
            self.v[name] = np.zeros_like(like)


def adam_step(params, eff_grads: dict, state: AdamState, hyper: AdamHyper, lr: float):
    """One optimizer step over ``params`` (name, tensor, decay triples).

    Returns {name: new ndarray}. ``t`` increments once per call, not per
    micro-batch. NaN/Inf in a gradient aborts before touching anything.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    hyper.validate()
    for name, _, _ in params:
        g = eff_grads.get(name)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for parameter {name!r}")

    state.t += 1
    t = state.t
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new = {}
    for name, tensor, decay in params:
        g = eff_grads.get(name)
        if g is None:
            g = np.zeros_like(tensor.data)
        g = g.astype(tensor.dtype, copy=False)
        if hyper.l2 > 0 and (decay or hyper.decay_norm_params):
            g = g + np.asarray(hyper.l2, dtype=tensor.dtype) * tensor.data
        state.ensure(name, tensor.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * np.square(g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        new[name] = tensor.data - lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return new


@dataclass
class Accumulator:
    """Running gradient sums over micro-batches of batch size 1."""

    target_count: int = 16
    sums: dict = field(default_factory=dict)
    micro_count: int = 0

    def add(self, grads: dict) -> None:
        for name, g in grads.items():
            if name in self.sums:
                if self.sums[name].shape != g.shape:
                    raise ConfigError(f"gradient shape changed for {name!r}")
                self.sums[name] += g
            else:
                self.sums[name] = g.copy()
        self.micro_count += 1

    @property
    def ready(self) -> bool:
        return self.micro_count == self.target_count

    def flush(self, allow_partial: bool = False) -> dict:
        """Mean gradient over the accumulated micro-batches; resets state."""
        if self.micro_count == 0:
            raise ConfigError("flush on an empty accumulator")
        if self.micro_count < self.target_count and not allow_partial:
            raise ConfigError(
                f"flush after {self.micro_count}/{self.target_count} micro-batches "
                "(set allow_partial for end-of-epoch flushes)")
        n = self.micro_count
        out = {name: s / n for name, s in self.sums.items()}
        self.sums = {}
        self.micro_count = 0
        return out


def lr_at(epoch: int, base: float) -> float:
    """Step decay: base * 10^-(epoch // 100)."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return base * 10.0 ** (-(epoch // 100))
