"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: while a ``Tape`` is active (``with Tape() as tape:``), every
operation whose result needs a gradient is recorded in execution order.
``tape.backward(loss)`` then walks the record in reverse, accumulating
gradients into ``Tensor.grad``. Leaf tensors (network weights) live outside
any tape and keep their accumulated gradients across tapes until zeroed.

A tape and its tensors belong to one thread; distinct tapes may run on
distinct threads (the active-tape stack is thread-local).
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

from .errors import DimensionError

# Guard for divisions and norm backward rules; degenerate all-zero rows occur
# at initialization and must not produce NaNs.
EPS = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape():
    """The innermost open Tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered operation record for one forward/backward pass."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted (unbalanced enter/exit)")
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: "Tensor") -> None:
        self._nodes.append(node)

    def backward(self, root: "Tensor") -> None:
        """Seed d(root)/d(root)=1 and propagate through the record in reverse.

        The record is in execution order, hence already topologically sorted;
        the reverse sweep visits each node exactly once.
        """
        if root._tape is not self:
            if not root.requires_grad:
                return  # fully constant graph (e.g. everything stop-gradiented)
            raise ValueError("root tensor was not recorded on this tape")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)


class Tensor:
    """Dense real array plus gradient slot.

    ``data`` is float64 by default (float32 accepted for speed). ``grad``
    always matches ``data``'s shape once set. ``data`` is treated as
    immutable after construction.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
        self.data = arr.astype(dtype, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._backward = None
        self._tape = None

    @classmethod
    def _from_data(cls, data: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._backward = None
        out._tape = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Operator sugar; scalars on the right of * are treated as constants.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return smul(self, other)

    def __rmul__(self, other):
        return smul(self, other)

    def __neg__(self):
        return smul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    """Tensor that never receives a gradient."""
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    """Leaf tensor that accumulates gradients across tapes."""
    return Tensor(data, requires_grad=True)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    # Never mutate in place: contributions may alias upstream grad buffers.
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor._from_data(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        tape = active_tape()
        if tape is not None:
            out._backward = backward
            out._tape = tape
            tape._record(out)
    return out


def custom_op(data: np.ndarray, parents: tuple, backward) -> Tensor:
    """Record a composite operation with a hand-written backward rule.

    ``backward(g)`` receives the output gradient and must accumulate into
    each parent via ``accumulate_grad``. Lets callers fuse many numpy steps
    (e.g. a whole recurrent layer) into one tape node.
    """
    return _make(np.asarray(data), tuple(parents), backward)


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor (no-op for constants)."""
    _accumulate(t, g)


def _need_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _need_2d(t: Tensor, op: str) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D tensor, got shape {t.data.shape}")


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _need_2d(a, "matmul")
    _need_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(
            f"matmul: inner dims disagree {a.data.shape} @ {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "add")
    data = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _need_same_shape(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    _need_same_shape(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(data, (a, b), backward)


def smul(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    data = a.data * c

    def backward(g):
        _accumulate(a, g * c)

    return _make(data, (a,), backward)


def divide(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a / (b + eps); intended for nonnegative denominators."""
    _need_same_shape(a, b, "divide")
    denom = b.data + EPS
    data = a.data / denom

    def backward(g):
        _accumulate(a, g / denom)
        _accumulate(b, -g * data / denom)

    return _make(data, (a, b), backward)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def backward(g):
        _accumulate(a, g * (2.0 * a.data))

    return _make(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root, clamped at zero; backward is eps-guarded."""
    data = np.sqrt(np.maximum(a.data, 0.0))

    def backward(g):
        _accumulate(a, g * (0.5 / (data + EPS)))

    return _make(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - data * data))

    return _make(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)

    def backward(g):
        _accumulate(a, g * (data * (1.0 - data)))

    return _make(data, (a,), backward)


def sum_(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())

    def backward(g):
        _accumulate(a, np.full(a.data.shape, float(g)))

    return _make(data, (a,), backward)


def mean_(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.sum() / n)

    def backward(g):
        _accumulate(a, np.full(a.data.shape, float(g) / n))

    return _make(data, (a,), backward)


def sq_norm_rows(a: Tensor) -> Tensor:
    """Per-row squared Euclidean norm of a 2-D tensor."""
    _need_2d(a, "sq_norm_rows")
    data = (a.data * a.data).sum(axis=1)

    def backward(g):
        _accumulate(a, 2.0 * a.data * g[:, None])

    return _make(data, (a,), backward)


def l2_norm_rows(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of a 2-D tensor."""
    _need_2d(a, "l2_norm_rows")
    data = np.sqrt((a.data * a.data).sum(axis=1))

    def backward(g):
        _accumulate(a, a.data * (g / (data + EPS))[:, None])

    return _make(data, (a,), backward)


def div_rows(a: Tensor, s: Tensor) -> Tensor:
    """Divide each row of ``a`` by the matching per-row scalar of ``s`` (eps-guarded)."""
    _need_2d(a, "div_rows")
    if s.data.shape != (a.data.shape[0],):
        raise DimensionError(
            f"div_rows: expected row scalars of shape ({a.data.shape[0]},), got {s.data.shape}"
        )
    denom = s.data + EPS
    data = a.data / denom[:, None]

    def backward(g):
        _accumulate(a, g / denom[:, None])
        _accumulate(s, -(g * data).sum(axis=1) / denom)

    return _make(data, (a, s), backward)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n tensor."""
    _need_2d(a, "add_rowvec")
    if v.data.shape != (a.data.shape[1],):
        raise DimensionError(
            f"add_rowvec: expected vector of shape ({a.data.shape[1]},), got {v.data.shape}"
        )
    data = a.data + v.data[None, :]

    def backward(g):
        _accumulate(a, g)
        _accumulate(v, g.sum(axis=0))

    return _make(data, (a, v), backward)


def add_colvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-m vector to every column of an m-by-n tensor."""
    _need_2d(a, "add_colvec")
    if v.data.shape != (a.data.shape[0],):
        raise DimensionError(
            f"add_colvec: expected vector of shape ({a.data.shape[0]},), got {v.data.shape}"
        )
    data = a.data + v.data[:, None]

    def backward(g):
        _accumulate(a, g)
        _accumulate(v, g.sum(axis=1))

    return _make(data, (a, v), backward)


def softmax_rows(z: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction for overflow safety."""
    _need_2d(z, "softmax_rows")
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        _accumulate(z, data * (g - inner))

    return _make(data, (z,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks all gradient flow backward."""
    return Tensor._from_data(x.data)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    _need_2d(a, "transpose")
    data = a.data.T

    def backward(g):
        _accumulate(a, g.T)

    return _make(data, (a,), backward)


def row(a: Tensor, i: int) -> Tensor:
    """Select row i of a 2-D tensor, kept 2-D with shape (1, n)."""
    _need_2d(a, "row")
    data = a.data[i : i + 1, :]

    def backward(g):
        full = np.zeros_like(a.data)
        full[i : i + 1, :] = g
        _accumulate(a, full)

    return _make(data, (a,), backward)


def cols(a: Tensor, j0: int, j1: int) -> Tensor:
    """Select the half-open column range [j0, j1) of a 2-D tensor."""
    _need_2d(a, "cols")
    data = a.data[:, j0:j1]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, j0:j1] = g
        _accumulate(a, full)

    return _make(data, (a,), backward)


def stack_rows(parts: list) -> Tensor:
    """Stack (1, n) tensors into an (m, n) tensor."""
    for p in parts:
        _need_2d(p, "stack_rows")
    data = np.concatenate([p.data for p in parts], axis=0)

    def backward(g):
        off = 0
        for p in parts:
            h = p.data.shape[0]
            _accumulate(p, g[off : off + h, :])
            off += h

    return _make(data, tuple(parts), backward)


def concat_cols(*parts: Tensor) -> Tensor:
    """Concatenate 2-D tensors along columns."""
    for p in parts:
        _need_2d(p, "concat_cols")
    data = np.concatenate([p.data for p in parts], axis=1)

    def backward(g):
        off = 0
        for p in parts:
            w = p.data.shape[1]
            _accumulate(p, g[:, off : off + w])
            off += w

    return _make(data, tuple(parts), backward)
