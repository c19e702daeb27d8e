"""Dense tensors with reverse-mode automatic differentiation.

Small numpy-backed engine: each operation records its inputs and a closure
that routes the upstream gradient to them.  Calling :meth:`Tensor.backward`
on a scalar loss topologically sorts the recorded graph and replays it once
in reverse.  64-bit scalars are the default; 32-bit can be selected per
tensor (or globally) for speed runs.

Tensors that take part in a recorded graph must not be mutated in place;
all operations here allocate fresh output arrays.
"""

from __future__ import annotations

import contextlib

import numpy as np


class TensorError(Exception):
    """Base class for tensor engine failures."""


class ShapeMismatch(TensorError):
    """Operands have incompatible shapes."""


class NumericError(TensorError):
    """Non-finite values where finite ones are required."""


class ContractError(Exception):
    """A caller violated an operation's precondition."""


DEFAULT_DTYPE = np.float64

_grad_enabled = True


def set_default_dtype(dtype) -> None:
    """Select the precision used for newly created tensors (float32/float64)."""
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}")
    DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense n-dimensional value with optional gradient accumulation."""

    __slots__ = ("data", "grad", "requires_grad", "_children", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype)
        elif arr.dtype != DEFAULT_DTYPE:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._children: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, grad={'yes' if self.grad is not None else 'no'})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph plumbing ------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += grad

    def backward(self) -> None:
        """Populate grads of everything reachable from this scalar loss.

        Repeated calls accumulate into existing grads unless they are
        zeroed in between.
        """
        if self.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._children:
                if id(child) not in visited:
                    stack.append((child, False))
        # Propagate through fresh buffers so a second call re-derives the
        # same leaf gradients instead of re-walking stale interior grads.
        saved = [(node, node.grad) for node in topo]
        for node in topo:
            node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node, prior in saved:
            if prior is not None:
                if node.grad is None:
                    node.grad = prior
                else:
                    node.grad += prior

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __rmul__(self, other):
        return hadamard(self, other)

    def __neg__(self):
        return hadamard(self, -1.0)

    def __sub__(self, other):
        return add(self, hadamard(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), hadamard(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, children: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(c.requires_grad for c in children):
        out.requires_grad = True
        out._children = children
        out._backward = backward
    return out


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    """Elementwise sum with numpy-style broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, (a, b), backward)


def hadamard(a, b) -> Tensor:
    """Elementwise product; broadcasting gradients route back by summation."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"hadamard: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: inner dimensions disagree, {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose needs a rank-2 tensor, got {a.shape}")

    def backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch(f"reshape: {a.shape} has {a.size} elements, target {shape}")

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the trailing axis; gradient splits back."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeMismatch(f"concat_last: leading shapes differ, {a.shape} vs {b.shape}")
    p = a.shape[-1]

    def backward(g):
        a._accumulate(g[..., :p])
        b._accumulate(g[..., p:])

    return _make(np.concatenate([a.data, b.data], axis=-1), (a, b), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    """Stack equal-shaped tensors along a new axis."""
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape
    for t in tensors:
        if t.shape != base:
            raise ShapeMismatch(f"stack: shapes differ, {base} vs {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            t._accumulate(piece)

    return _make(data, tuple(tensors), backward)


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _make(data, (a,), backward)


# -- nonlinearities ----------------------------------------------------


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), backward)


def softmax_over(a: Tensor, axis: int) -> Tensor:
    """Softmax along one axis, stabilized by max-subtraction."""
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"softmax_over: axis {axis} invalid for shape {a.shape}")
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax_over: input contains NaN or Inf")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - dot))

    return _make(data, (a,), backward)


# -- table lookup and loss --------------------------------------------


def take_rows(table: Tensor, indices) -> Tensor:
    """Gather rows of a [V x e] table by an integer index array."""
    table = _as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeMismatch(f"take_rows: table must be rank 2, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError("take_rows: index out of range")
    data = table.data[idx]

    def backward(g):
        acc = np.zeros_like(table.data)
        np.add.at(acc, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(acc)

    return _make(data, (table,), backward)


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy_logits: need [batch x classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractError(f"cross_entropy_logits: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError("cross_entropy_logits: label out of range")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    losses = lse - x[np.arange(n), labels]
    data = np.asarray(losses.mean())

    def backward(g):
        soft = np.exp(x - m)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(n), labels] -= 1.0
        logits._accumulate(float(g) * soft / n)

    return _make(data, (logits,), backward)
