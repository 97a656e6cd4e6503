"""Reverse-mode autodiff on float64 numpy arrays.

A module-level tape records one node per op application (output, inputs,
backward closure). backward() consumes the tape in reverse, accumulating
gradients into leaf tensors. Ops are free functions returning new
Tensors; nothing mutates an existing Tensor's data.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import errors


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        # asarray with order="C" keeps 0-d arrays 0-d (ascontiguousarray
        # would promote them to 1-d) and guarantees reshape(-1) is a view,
        # which grad_check relies on for in-place perturbation.
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise errors.NotScalar(f"item() on shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all semantics live in the module-level functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


_tape: list[_Node] = []
_grad_enabled: bool = True


@contextmanager
def no_grad():
    """Disable recording inside the block (used for teacher passes and eval)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def record(out: Tensor, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Attach a backward closure to `out` if recording is live.

    `backward(g)` receives the upstream gradient array and must return one
    gradient array (or None) per input, in order. Exposed so composite ops
    in other modules can participate in the same tape.
    """
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        _tape.append(_Node(out, tuple(inputs), backward))
    return out


def backward(loss: Tensor) -> None:
    """Run reverse accumulation from `loss` and consume the tape.

    Gradients sum into `.grad` of leaf tensors (requires_grad, not produced
    by a recorded op). Repeated backward calls keep accumulating into
    leaves; callers reset with zero_grads().
    """
    global _tape
    if loss.size != 1:
        raise errors.NotScalar(f"backward on shape {loss.shape}")
    nodes, _tape = _tape, []
    produced = {id(n.out) for n in nodes}
    if not loss.requires_grad:
        raise errors.GraphError("loss does not require grad; nothing was recorded")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if id(loss) not in produced:
        if loss._from_op:
            raise errors.GraphError("graph already consumed by a previous backward")
        # degenerate case: loss is itself a leaf
        _accumulate_leaf(loss, grads[id(loss)])
        return

    for node in reversed(nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        input_grads = node.backward(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            if id(t) in produced:
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
            elif t.requires_grad:
                _accumulate_leaf(t, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------- factories

def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0:
        raise errors.InvalidShape("shape must be non-empty")
    if any(d < 1 for d in shape):
        raise errors.InvalidShape(f"all dims must be >= 1, got {shape}")
    return shape


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(_check_shape(shape)), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(_check_shape(shape)), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(_check_shape(shape), float(value)), requires_grad)


def he_normal(shape, fan_in: int, rng, requires_grad: bool = True) -> Tensor:
    """Gaussian init with std sqrt(2/fan_in); rng is a Generator or a seed."""
    if fan_in < 1:
        raise errors.InvalidShape(f"fan_in must be >= 1, got {fan_in}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, _check_shape(shape)), requires_grad)


# --------------------------------------------------------------- elementwise

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise errors.ShapeMismatch(f"{op}: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0
    # np.maximum rather than where: NaN must propagate, not silently zero
    out = Tensor(np.maximum(a.data, 0.0))
    return record(out, (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported as NonFinite below
        val = np.exp(a.data)
    if not np.isfinite(val).all():
        raise errors.NonFinite("exp overflow")
    out = Tensor(val)
    return record(out, (a,), lambda g: (g * val,))


def log(a: Tensor) -> Tensor:
    if not (a.data > 0.0).all():
        raise errors.DomainError("log requires strictly positive input")
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    floor = float(floor)
    mask = a.data > floor  # subgradient 0 on the clamped side, including ties
    out = Tensor(np.maximum(a.data, floor))
    return record(out, (a,), lambda g: (g * mask,))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise errors.InvalidShape(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise errors.ShapeMismatch(f"matmul inner dims: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise errors.InvalidShape(f"transpose needs a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T)
    return record(out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(d) for d in shape)
    if int(np.prod(shape)) != a.size:
        raise errors.ShapeMismatch(f"reshape {a.shape} -> {shape}")
    orig = a.shape
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(orig),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise errors.InvalidShape("concat of zero tensors")
    nd = tensors[0].data.ndim
    for t in tensors[1:]:
        if t.data.ndim != nd:
            raise errors.ShapeMismatch("concat rank mismatch")
        if (t.shape[:axis] + t.shape[axis + 1:]) != (
            tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        ):
            raise errors.ShapeMismatch(
                f"concat: {t.shape} vs {tensors[0].shape} along axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tuple(tensors), bwd)


# ----------------------------------------------------------------- softmax

def softmax(a: Tensor, axis: int) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - dot),)

    return record(out, (a,), bwd)


# ---------------------------------------------------------------- reductions

def _reduce_axes(a: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(a.data.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % a.data.ndim for ax in axis)


def _unreduce(g: np.ndarray, orig: tuple[int, ...], axes: tuple[int, ...]) -> np.ndarray:
    keep = tuple(1 if ax in axes else d for ax, d in enumerate(orig))
    return np.broadcast_to(np.asarray(g).reshape(keep), orig).copy()


def tsum(a: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(a, axis)
    out = Tensor(a.data.sum(axis=axes))
    orig = a.shape
    return record(out, (a,), lambda g: (_unreduce(g, orig, axes),))


def tmean(a: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(a, axis)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = Tensor(a.data.mean(axis=axes))
    orig = a.shape
    return record(out, (a,), lambda g: (_unreduce(g, orig, axes) / count,))


# --------------------------------------------------------------- grad check

def grad_check(f, inputs: Sequence[Tensor], eps: float = 1e-5, coords=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f(*inputs) must be a pure scalar function. coords optionally names a
    subsample as (input_index, flat_index) pairs; defaults to every
    coordinate of every input. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = f(*inputs)
    backward(out)
    analytic = [
        t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    if coords is None:
        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = f(*inputs).item()
            flat[j] = orig - eps
            fm = f(*inputs).item()
            flat[j] = orig
            numeric = (fp - fm) / (2.0 * eps)
            ana = float(analytic[i].reshape(-1)[j])
            rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
