"""Dense tensors and a reverse-mode differentiation tape.

A :class:`Tensor` wraps a numpy array. While a :class:`Tape` is active, every
operation whose inputs require gradients appends a node to the tape; since
nodes are appended as they are computed, tape order is topological.
:func:`backward` replays the tape in reverse.

Two precisions are used throughout: float32 for training and float64
("check" precision) for oracle and finite-difference tests.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

STANDARD = np.float32
CHECK = np.float64

LEAKY_SLOPE = 0.01


class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(STANDARD)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.ndim > 4:
            raise ContractError(f"tensors have at most 4 dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def parameter(data, name: Optional[str] = None, dtype=STANDARD) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; one tape belongs to one training step.
    """

    nodes: list = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def register(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        self.params[name] = tensor
        return tensor

    def clear(self) -> None:
        self.nodes.clear()

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()


class _TapeState(threading.local):
    def __init__(self):
        self.stack: list = []


_state = _TapeState()


def active_tape() -> Optional[Tape]:
    return _state.stack[-1] if _state.stack else None


class GradientMap(dict):
    """Maps tensors (by identity) to gradient arrays of identical shape."""

    def of(self, tensor: Tensor) -> np.ndarray:
        g = self.get(tensor)
        return np.zeros_like(tensor.data) if g is None else g


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Wrap ``out_data`` in a tensor and append a node if differentiation is active."""
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def backward(root: Tensor, tape: Optional[Tape] = None) -> GradientMap:
    """Gradients of a scalar ``root`` with respect to every tensor on the tape."""
    tape = tape or active_tape()
    if tape is None:
        raise ContractError("backward needs a tape")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    grads = GradientMap()
    grads[root] = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise AssertionError(f"{node.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            prev = grads.get(inp)
            grads[inp] = gi if prev is None else prev + gi
    return grads


# ----------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    x, y = a.data, b.data
    return record("mul", (a, b), x * y, lambda g: (g * y, g * x))


def neg(a: Tensor) -> Tensor:
    return record("neg", (a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(np.minimum(a.data, 80.0))
    return record("exp", (a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = np.maximum(a.data, np.finfo(a.dtype).tiny)
    return record("log", (a,), np.log(x), lambda g: (g / x,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record("relu", (a,), a.data * mask, lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    return record("leaky_relu", (a,), x * scale, lambda g: (g * scale,))


UNARY = {"negate": neg, "exp": exp, "log": log, "tanh": tanh, "sigmoid": sigmoid,
         "relu": relu, "leaky_relu": leaky_relu}
BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name to one of the elementwise operators."""
    if b is None:
        if op_kind not in UNARY:
            raise ContractError(f"unknown unary op {op_kind!r}")
        return UNARY[op_kind](a)
    if op_kind not in BINARY:
        raise ContractError(f"unknown binary op {op_kind!r}")
    return BINARY[op_kind](a, b)


# ----------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    x, y = a.data, b.data
    return record("matmul", (a, b), x @ y, lambda g: (g @ y.T, x.T @ g))


def add_bias(x: Tensor, bias: Tensor, axis: int) -> Tensor:
    """``x + bias`` broadcast along ``axis``; the only broadcasting operator."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[axis]:
        raise ContractError(f"add_bias: bias {bias.shape} does not fit axis {axis} of {x.shape}")
    shape = [1] * x.ndim
    shape[axis] = -1
    other = tuple(i for i in range(x.ndim) if i != axis)
    return record("add_bias", (x, bias), x.data + bias.data.reshape(shape),
                  lambda g: (g, g.sum(axis=other)))


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return record("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis),
                  lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather along one axis with an integer index array."""
    index = np.asarray(index)

    def grad(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None),) * axis + (index,), g)
        return (out,)

    return record("take", (a,), np.take(a.data, index, axis=axis), grad)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return record("sum", (a,), np.array([a.data.sum()], dtype=a.dtype),
                  lambda g: (np.full(shape, g[0], dtype=a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return record("mean", (a,), np.array([a.data.mean()], dtype=a.dtype),
                  lambda g: (np.full(shape, g[0] / n, dtype=a.dtype),))


def scale(a: Tensor, factor: float) -> Tensor:
    return record("scale", (a,), a.data * a.dtype.type(factor), lambda g: (g * a.dtype.type(factor),))


# ----------------------------------------------------------------- softmax

def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis of a T x c tensor."""
    if x.shape[-1] < 2:
        raise ContractError(f"softmax needs at least 2 classes, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record("softmax", (x,), p, grad)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis."""
    if x.shape[-1] < 2:
        raise ContractError(f"log_softmax needs at least 2 classes, got shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def grad(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", (x,), out, grad)
