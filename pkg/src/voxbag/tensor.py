"""Dense tensors and reverse-mode automatic differentiation.

A :class:`Tensor` wraps a contiguous numpy array in single or double
precision. Operations (see :mod:`voxbag.ops`) record themselves onto the
active :class:`Tape` whenever any input participates in gradient
computation; :func:`backward` then replays the tape in exact reverse
execution order, accumulating gradients additively across fan-out.

Tensors are treated as immutable values once created: no op mutates its
inputs, and gradients live in a separate ``grad`` slot that only
:func:`backward` writes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ShapeError

SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional array value, optionally participating in autodiff."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype.type not in SUPPORTED_DTYPES:
            arr = arr.astype(np.float32)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Node:
    """One recorded operation: output, inputs, and its backward rule.

    ``backward_rule(grad_out)`` returns one gradient array (or None) per
    input, in input order.
    """

    __slots__ = ("name", "inputs", "output", "backward_rule")

    def __init__(self, name: str, inputs: Sequence[Tensor], output: Tensor,
                 backward_rule: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.name = name
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of operations; usable for exactly one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


_TAPE_STACK: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ConfigError(f"mixed precisions in one graph: {sorted(d.name for d in dtypes)}")


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_rule) -> Tensor:
    """Wrap ``out_data`` in a Tensor, recording the op if a tape is live.

    The node is recorded only when a tape is active and some input
    requires a gradient; otherwise this is a plain forward computation.
    """
    tape = active_tape()
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        if tape.consumed:
            raise ConfigError("tape already consumed by backward(); use a fresh Tape")
        tape.nodes.append(_Node(name, inputs, out, backward_rule))
    return out


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The tape is traversed in exact reverse execution order and consumed;
    calling backward twice on the same tape raises ConfigError.
    """
    if tape is None:
        tape = active_tape()
    if tape is None:
        raise ConfigError("backward() needs a live tape (pass one or call inside `with Tape()`)")
    if tape.consumed:
        raise ConfigError("tape already consumed; gradients were not reset")
    if loss.size != 1:
        raise ConfigError(f"backward root must be scalar, got shape {loss.shape}")

    for node in tape.nodes:
        node.output.grad = None
        for t in node.inputs:
            t.grad = None
    loss.grad = np.ones_like(loss.data)

    for node in reversed(tape.nodes):
        gout = node.output.grad
        if gout is None:
            continue
        gins = node.backward_rule(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g.astype(t.dtype, copy=True)
            else:
                t.grad += g
    tape.consumed = True


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor. Per-element error is
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. Double
    precision input required for meaningful results.
    """
    xg = Tensor(x.data.astype(np.float64), requires_grad=True)
    with Tape() as tape:
        loss = f(xg)
    backward(loss, tape)
    analytic = np.zeros_like(xg.data) if xg.grad is None else xg.grad

    numeric = np.zeros_like(xg.data)
    flat = xg.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(xg.data)).item()
        flat[i] = orig - h
        fm = f(Tensor(xg.data)).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / denom))
