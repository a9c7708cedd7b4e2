"""Dense 2-D tensors with reverse-mode automatic differentiation.

Every value is a rows x cols matrix in either float32 (training precision)
or float64 (verification precision); the two must never meet on one tape.
Operations return fresh Tensor nodes that remember their parents and a
backward closure, so ``backward(loss)`` can walk the graph once in reverse
topological order and accumulate gradients into the leaves.
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, DimensionError, StateError, UsageError

ACTIVATION_KINDS = ("sigmoid", "tanh", "relu", "identity")


class Tensor:
    """One node of the tape: a 2-D array plus optional gradient state."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_back_done")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.atleast_2d(arr)
        if arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D matrices, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._back_done = False

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor({self.data.shape[0]}x{self.data.shape[1]}, {self.data.dtype}{flag})"


def param(data, dtype=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def const(data, dtype=None) -> Tensor:
    """Leaf tensor outside the gradient flow."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    # constants need no history; dropping it keeps eval-only graphs flat
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._back_done = False
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, copy=True)
    else:
        t.grad += g


def _need_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _need_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.dtype != b.data.dtype:
        raise ConfigError(
            f"{op}: {a.data.dtype} and {b.data.dtype} mixed on one tape; keep a"
            " single precision per graph"
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: {a.data.shape} x {b.data.shape}")
    _need_same_dtype("matmul", a, b)
    out = a.data @ b.data

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("add", a, b)
    _need_same_dtype("add", a, b)

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), back)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape("hadamard", a, b)
    _need_same_dtype("hadamard", a, b)

    def back(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(a.data * b.data, (a, b), back)


def add_scalar(x: Tensor, c: float) -> Tensor:
    def back(g):
        _accum(x, g)

    return _result(x.data + x.data.dtype.type(c), (x,), back)


def scale(x: Tensor, k: float) -> Tensor:
    kk = x.data.dtype.type(k)

    def back(g):
        _accum(x, g * kk)

    return _result(x.data * kk, (x,), back)


def one_minus(x: Tensor) -> Tensor:
    """1 - x, the complement used by every gating cell."""
    return add_scalar(scale(x, -1.0), 1.0)


def sigmoid(x: Tensor) -> Tensor:
    # piecewise form avoids exp overflow on large negative inputs
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)

    def back(g):
        _accum(x, g * out * (1.0 - out))

    return _result(out, (x,), back)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def back(g):
        _accum(x, g * (1.0 - out * out))

    return _result(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def back(g):
        _accum(x, g * (x.data > 0))

    return _result(out, (x,), back)


def identity(x: Tensor) -> Tensor:
    def back(g):
        _accum(x, g)

    return _result(x.data, (x,), back)


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}
_BINARY = {"add": add, "hadamard": hadamard}


def elementwise(kind: str, x: Tensor, y: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name; activations are unary."""
    if kind in _UNARY:
        if y is not None:
            raise UsageError(f"{kind} is unary, second operand given")
        return _UNARY[kind](x)
    if kind in _BINARY:
        if y is None:
            raise UsageError(f"{kind} needs two operands")
        return _BINARY[kind](x, y)
    raise UsageError(f"unknown elementwise kind {kind!r}")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, computed with max subtraction for stability."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    return _result(y, (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def back(g):
        _accum(x, g - p * g.sum(axis=1, keepdims=True))

    return _result(y, (x,), back)


def transpose(x: Tensor) -> Tensor:
    def back(g):
        _accum(x, g.T)

    return _result(x.data.T, (x,), back)


def add_row(x: Tensor, v: Tensor) -> Tensor:
    """Add a 1 x cols row vector to every row of x."""
    if v.data.shape != (1, x.cols):
        raise DimensionError(f"add_row: vector {v.data.shape} does not match {x.data.shape}")
    _need_same_dtype("add_row", x, v)

    def back(g):
        _accum(x, g)
        _accum(v, g.sum(axis=0, keepdims=True))

    return _result(x.data + v.data, (x, v), back)


def mul_row(x: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of x by a 1 x cols row vector."""
    if v.data.shape != (1, x.cols):
        raise DimensionError(f"mul_row: vector {v.data.shape} does not match {x.data.shape}")
    _need_same_dtype("mul_row", x, v)

    def back(g):
        _accum(x, g * v.data)
        _accum(v, (g * x.data).sum(axis=0, keepdims=True))

    return _result(x.data * v.data, (x, v), back)


def embed_columns(w: Tensor, ids) -> Tensor:
    """Look up columns of w by token id; returns len(ids) x rows(w).

    Row b of the result is column ids[b] of w, so a batch of token ids turns
    into a batch of embedding rows in one op.
    """
    from .errors import DataError

    idx = np.asarray(ids)
    if idx.ndim != 1:
        raise DimensionError(f"embed_columns: ids must be 1-D, got ndim={idx.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= w.cols):
        raise DataError(
            f"embed_columns: id out of range 0..{w.cols - 1}: {idx[(idx < 0) | (idx >= w.cols)][0]}"
        )
    out = w.data[:, idx].T.copy()

    def back(g):
        buf = np.zeros((w.cols, w.rows), dtype=g.dtype)
        np.add.at(buf, idx, g)  # duplicate ids in a batch must accumulate
        _accum(w, buf.T)

    return _result(out, (w,), back)


def take_per_row(x: Tensor, cols) -> Tensor:
    """Pick one entry per row: out[i, 0] = x[i, cols[i]]."""
    from .errors import DataError

    idx = np.asarray(cols)
    if idx.ndim != 1 or idx.size != x.rows:
        raise DimensionError(
            f"take_per_row: need {x.rows} column indices, got shape {idx.shape}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= x.cols):
        raise DataError(f"take_per_row: column index out of range 0..{x.cols - 1}")
    rows_arange = np.arange(x.rows)
    out = x.data[rows_arange, idx].reshape(-1, 1)

    def back(g):
        buf = np.zeros_like(x.data)
        buf[rows_arange, idx] = g[:, 0]
        _accum(x, buf)

    return _result(out, (x,), back)


def sum_all(x: Tensor) -> Tensor:
    out = np.array([[x.data.sum()]], dtype=x.data.dtype)

    def back(g):
        _accum(x, np.full_like(x.data, g[0, 0]))

    return _result(out, (x,), back)


def _toposort(root: Tensor) -> list:
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse sweep from a scalar loss; every node is visited once.

    Gradients accumulate into the .grad of every reachable leaf with
    requires_grad set. Calling twice on the same node is a StateError since
    the intermediate gradients it would reread are already consumed.
    """
    if loss.data.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 scalar, got {loss.data.shape}")
    if loss._back_done:
        raise StateError("backward already ran on this tape; build a fresh graph")
    loss._back_done = True
    if not loss.requires_grad:
        return  # constant loss: every gradient stays zero
    order = _toposort(loss)
    loss.grad = np.ones((1, 1), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def clip_gradients(grads, bound: float):
    """Clamp every gradient component into [-bound, bound]."""
    if not bound > 0:
        raise ConfigError(f"clip bound must be positive, got {bound}")
    if isinstance(grads, dict):
        return {k: np.clip(v, -bound, bound) for k, v in grads.items()}
    return np.clip(np.asarray(grads), -bound, bound)


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Compare analytic gradients of f() against central differences.

    f must rebuild its graph from the given parameter leaves on every call
    and return a 1x1 loss. Returns the worst relative error
    |a - n| / max(1e-8, |a| + |n|) over all parameter components.
    """
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ConfigError("finite_diff_check runs in 64-bit mode; cast parameters first")
    zero_grad(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = f().item()
            flat[i] = orig - eps
            lm = f().item()
            flat[i] = orig
            num = (lp - lm) / (2.0 * eps)
            err = abs(gflat[i] - num) / max(1e-8, abs(gflat[i]) + abs(num))
            if err > worst:
                worst = err
    return worst


def seed_stream(seed: int, name: str) -> np.random.Generator:
    """Deterministic generator for one named stream of a run seed.

    Different names give statistically independent streams; the same
    (seed, name) pair always yields the same draws.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = struct.unpack("<4Q", digest[:32])
    return np.random.default_rng(np.random.SeedSequence([int(seed) % 2**64, *words]))
