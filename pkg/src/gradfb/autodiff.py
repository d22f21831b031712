"""Reverse-mode autodiff over numpy arrays with support for double backprop.

Every backward rule is written in terms of the same differentiable ops, so a
gradient computed with ``create_graph=True`` is itself a graph node and can be
differentiated again. The gradient-matching objective needs exactly that: it
is a function of a gradient.

The op set is closed: add, sub, neg, mul, scale, scalar_mul, square, sum,
expand, sum_trailing, matmul, transpose, reshape, sigmoid, unfold/fold (the
pair behind ``conv2d``), softmax, log_softmax and a fused
softmax-cross-entropy against a probability vector.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_local = threading.local()


def is_recording() -> bool:
    return getattr(_local, "recording", True)


@contextlib.contextmanager
def recording(enabled: bool):
    """Enable or disable graph construction for the current thread."""
    prev = is_recording()
    _local.recording = enabled
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    return recording(False)


class Tensor:
    """Dense float64 array, optionally a node of the differentiation graph.

    Arrays are never mutated in place once wrapped, so ops may share memory
    with their inputs (views from reshape, transpose and expand).
    """

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        if other.shape == () and self.shape != ():
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(shape, float(x)))


def tensor(shape: Sequence[int], data: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a leaf tensor from a shape and row-major data, validating both."""
    values = np.asarray(list(data) if not isinstance(data, np.ndarray) else data, dtype=DTYPE).reshape(-1)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != values.size:
        raise ValueError(f"shape {shape} needs {int(np.prod(shape))} values, got {values.size}")
    if not np.all(np.isfinite(values)):
        raise ValueError("tensor data contains non-finite values")
    return Tensor(values.reshape(shape).copy(), requires_grad=requires_grad)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = parents
        out._backward = backward
    else:
        out.op = op
    return out


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _node(a.data + b.data, (a, b), lambda g, need: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _node(a.data - b.data, (a, b), lambda g, need: (g, neg(g) if need[1] else None), "sub")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g, need: (neg(g),), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")

    def backward(g, need):
        return (mul(g, b) if need[0] else None, mul(g, a) if need[1] else None)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant (not a graph input)."""
    c = float(c)
    return _node(a.data * c, (a,), lambda g, need: (scale(g, c),), "scale")


def scalar_mul(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element of ``x`` by the 0-d tensor ``s``."""
    if s.shape != ():
        raise ValueError(f"scalar_mul: expected 0-d scale, got {s.shape}")

    def backward(g, need):
        gx = scalar_mul(g, s) if need[0] else None
        gs = sum(mul(g, x)) if need[1] else None
        return gx, gs

    return _node(x.data * s.data, (x, s), backward, "scalar_mul")


def square(a: Tensor) -> Tensor:
    return _node(a.data * a.data, (a,), lambda g, need: (mul(g, scale(a, 2.0)),), "square")


def sigmoid(a: Tensor) -> Tensor:
    def backward(g, need):
        s = sigmoid(a)
        return (mul(g, sub(s, mul(s, s))),)

    return _node(_sigmoid(a.data), (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return sum_trailing(a, 0)


def sum_trailing(a: Tensor, keep: int) -> Tensor:
    """Sum over every axis after the first ``keep`` axes."""
    axes = tuple(range(keep, a.ndim))
    shape = a.shape
    return _node(a.data.sum(axis=axes) if axes else a.data, (a,),
                 lambda g, need: (expand(g, shape),), "sum_trailing")


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Repeat ``a`` over trailing axes; ``a.shape`` must be a prefix of ``shape``."""
    shape = tuple(shape)
    if shape[: a.ndim] != a.shape:
        raise ValueError(f"expand: {a.shape} is not a leading prefix of {shape}")
    keep = a.ndim
    view = a.data.reshape(a.shape + (1,) * (len(shape) - keep))
    return _node(np.broadcast_to(view, shape), (a,),
                 lambda g, need: (sum_trailing(g, keep),), "expand")


# ---------------------------------------------------------------- linear algebra / shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g, need):
        ga = matmul(g, transpose(b)) if need[0] else None
        gb = matmul(transpose(a), g) if need[1] else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return _node(a.data.T, (a,), lambda g, need: (transpose(g),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g, need: (reshape(g, src),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.size,))


# ---------------------------------------------------------------- convolution


def _conv_geometry(shape, k, pad):
    c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {k}x{k} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    return c, h, w, ho, wo


def unfold(x: Tensor, k: int, pad: int) -> Tensor:
    """im2col: (C, H, W) -> (C*k*k, Ho*Wo) patch matrix, zero padding ``pad``."""
    if x.ndim != 3:
        raise ValueError(f"unfold expects (C, H, W), got {x.shape}")
    c, h, w, ho, wo = _conv_geometry(x.shape, k, pad)
    src = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(src, (k, k), axis=(1, 2))
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, ho * wo)
    shape = x.shape
    return _node(np.ascontiguousarray(cols), (x,), lambda g, need: (fold(g, shape, k, pad),), "unfold")


def fold(cols: Tensor, shape: Sequence[int], k: int, pad: int) -> Tensor:
    """col2im, the adjoint of :func:`unfold`; overlapping patches are summed."""
    shape = tuple(shape)
    c, h, w, ho, wo = _conv_geometry(shape, k, pad)
    if cols.shape != (c * k * k, ho * wo):
        raise ValueError(f"fold: got {cols.shape}, expected {(c * k * k, ho * wo)}")
    blocks = cols.data.reshape(c, k, k, ho, wo)
    out = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, i:i + ho, j:j + wo] += blocks[:, i, j]
    out = out[:, pad:pad + h, pad:pad + w].copy()
    return _node(out, (cols,), lambda g, need: (unfold(g, k, pad),), "fold")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: str = "valid") -> Tensor:
    """Stride-1 cross-correlation of a (C, H, W) image with (O, C, k, k) filters."""
    if weight.ndim != 4 or x.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise ValueError(f"conv2d: incompatible input {x.shape} and weight {weight.shape}")
    out_c, in_c, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if padding == "valid":
        pad = 0
    elif padding == "same":
        if k % 2 == 0:
            raise ValueError("conv2d: 'same' padding needs an odd kernel size")
        pad = (k - 1) // 2
    else:
        raise ValueError(f"unknown padding {padding!r}")
    _, _, _, ho, wo = _conv_geometry(x.shape, k, pad)
    cols = unfold(x, k, pad)
    out = matmul(reshape(weight, (out_c, in_c * k * k)), cols)
    if bias is not None:
        out = add(out, expand(bias, out.shape))
    return reshape(out, (out_c, ho, wo))


# ---------------------------------------------------------------- softmax family


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 1:
        raise ValueError("softmax expects a vector")

    def backward(g, need):
        s = softmax(z)
        dot = sum(mul(g, s))
        return (mul(s, sub(g, expand(dot, s.shape))),)

    return _node(np.exp(_log_softmax(z.data)), (z,), backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    if z.ndim != 1:
        raise ValueError("log_softmax expects a vector")

    def backward(g, need):
        return (sub(g, mul(softmax(z), expand(sum(g), z.shape))),)

    return _node(_log_softmax(z.data), (z,), backward, "log_softmax")


def softmax_cross_entropy(logits: Tensor, probs: Tensor) -> Tensor:
    """-sum(p * log_softmax(z)), fused through log-sum-exp."""
    if logits.ndim != 1:
        raise ValueError("softmax_cross_entropy expects logits as a vector")
    _check_same(logits, probs, "softmax_cross_entropy")

    def backward(g, need):
        gz = gp = None
        if need[0]:
            gz = scalar_mul(sub(scalar_mul(softmax(logits), sum(probs)), probs), g)
        if need[1]:
            gp = scalar_mul(neg(log_softmax(logits)), g)
        return gz, gp

    value = -np.dot(probs.data, _log_softmax(logits.data))
    return _node(np.asarray(value, dtype=DTYPE), (logits, probs), backward, "softmax_cross_entropy")


# ---------------------------------------------------------------- gradients


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a single-element ``output`` with respect to each of ``wrt``.

    With ``create_graph=True`` the backward pass is itself recorded, so the
    returned tensors can be fed into further ops and differentiated.
    """
    if output.size != 1:
        raise ValueError(f"grad needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        raise ValueError("output does not depend on any tensor requiring grad")
    order = _topo_order(output)
    reachable = {id(t) for t in order}
    for w in wrt:
        if id(w) not in reachable:
            raise ValueError(f"{w!r} is not part of the graph that produced the output")
    targets = {id(w) for w in wrt}

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones(output.shape))}
    with recording(create_graph):
        for node in reversed(order):
            g = grads.get(id(node)) if id(node) in targets else grads.pop(id(node), None)
            if g is None or node._backward is None:
                continue
            need = tuple(p.requires_grad for p in node._parents)
            for parent, gp in zip(node._parents, node._backward(g, need)):
                if gp is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = add(grads[key], gp) if key in grads else gp
    return [grads.get(id(w)) or Tensor(np.zeros(w.shape)) for w in wrt]
