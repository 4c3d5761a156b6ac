"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive builds a new :class:`Tensor` from numpy arrays. When a
:class:`Tape` is active and at least one input requires a gradient, the
primitive appends its output node to the tape together with a closure that
maps the output gradient to input gradients. :meth:`Tape.backward` walks the
recorded nodes in reverse order exactly once.

Shapes are explicit. The only implicit expansion supported is adding a bias
vector to the last axis of a matrix.
"""
from __future__ import annotations

import builtins

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "ContractError",
    "backward",
    "no_grad_active",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "concat",
    "split",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "embedding",
    "pick",
    "batched_matvec",
    "sum",
    "mean",
    "masked_fill",
    "max_pool",
    "segment_mean",
    "reshape",
    "transpose",
]


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if np.isnan(arr).any():
            raise NumericError(f"NaN in tensor{' ' + name if name else ''} of shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; primitives executed inside the block are
    recorded. ``backward`` may be called once per tape.
    """

    _stack: list[Tape] = []

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Returns a dict keyed by leaf tensor.
        """
        if self._consumed:
            raise ContractError("backward already ran on this tape; start a new Tape")
        if loss.data.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise ContractError("tape is empty")
        self._consumed = True
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    if parent.grad is None:
                        parent.grad = np.array(pg, dtype=np.float64, copy=True)
                    else:
                        parent.grad = parent.grad + pg
                    leaves[id(parent)] = parent
                else:
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
        return {leaf: leaf.grad for leaf in leaves.values()}


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def no_grad_active() -> bool:
    return not Tape._stack


def _make(data, parents, fn):
    out = Tensor(data)
    if Tape._stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
        Tape._stack[-1].nodes.append(out)
    return out


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- algebra


def matmul(a, b):
    a, b = _t(a), _t(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    A, B = a.data, b.data

    def fn(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    return _make(A @ B, (a, b), fn)


def add(a, b):
    """Elementwise sum; ``b`` may also be a bias vector over the last axis of ``a``."""
    a, b = _t(a), _t(b)
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))
        return _make(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes {a.shape} and {b.shape} are incompatible")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _t(a), _t(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} and {b.shape} are incompatible")
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, c: float):
    a = _t(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def concat(tensors, axis=-1):
    tensors = [_t(x) for x in tensors]
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for x in tensors[1:]:
        if x.data.ndim != ndim or any(
            x.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise ShapeError(f"concat shapes {tensors[0].shape} and {x.shape} are incompatible on axis {ax}")
    sizes = [x.shape[ax] for x in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([x.data for x in tensors], axis=ax), tuple(tensors), fn)


def split(a, sizes, axis=-1):
    """Slice ``a`` into consecutive chunks along ``axis``; each chunk is its own node."""
    a = _t(a)
    ax = axis % a.data.ndim
    if builtins.sum(sizes) != a.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis {ax} of {a.shape}")
    out = []
    start = 0
    for n in sizes:
        sl = [slice(None)] * a.data.ndim
        sl[ax] = slice(start, start + n)
        sl = tuple(sl)

        def fn(g, sl=sl):
            full = np.zeros_like(a.data)
            full[sl] = g
            return (full,)

        out.append(_make(a.data[sl], (a,), fn))
        start += n
    return out


def reshape(a, shape):
    a = _t(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(data, (a,), lambda g: (g.reshape(old),))


def transpose(a):
    a = _t(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------- nonlinearities


def relu(a):
    a = _t(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tanh(a):
    a = _t(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _t(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = _t(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = _t(a)
    x = a.data
    with np.errstate(divide="ignore"):
        y = np.log(x)
    if (x < 0).any():
        raise NumericError("log of a negative value")

    def fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(g == 0, 0.0, g / x),)

    return _make(y, (a,), fn)


def softmax(a):
    """Softmax over the last axis with max subtraction; ``-inf`` entries get probability 0."""
    a = _t(a)
    if a.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    y = _softmax(a.data)

    def fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), fn)


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("softmax row without any finite entry")
    z = np.exp(x - m)
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(a):
    """Log of softmax over the last axis. Masked ``-inf`` entries stay ``-inf`` and get zero gradient."""
    a = _t(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericError("log_softmax row without any finite entry")
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def fn(g):
        g = np.where(np.isneginf(y), 0.0, g)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _make(y, (a,), fn)


# ------------------------------------------------------------- indexing


def scatter_rows(n_rows: int, ids: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values[i]`` into row ``ids[i]`` of an ``(n_rows, ...)`` zero array."""
    ids = np.asarray(ids).reshape(-1)
    values = np.asarray(values)
    if values.shape[0] != ids.size:
        raise ShapeError(f"{ids.size} ids for {values.shape[0]} value rows")
    out = np.zeros((n_rows,) + values.shape[1:])
    if ids.size == 0:
        return out
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    uniq, starts = np.unique(sorted_ids, return_index=True)
    out[uniq] = np.add.reduceat(values[order], starts, axis=0)
    return out


def embedding(table, ids):
    """Rows of ``table`` selected by integer array ``ids`` (any shape)."""
    table = _t(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding table must be a matrix, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range for table with {table.shape[0]} rows")
    n, d = table.shape

    def fn(g):
        return (scatter_rows(n, ids, g.reshape(-1, d)),)

    return _make(table.data[ids], (table,), fn)


def pick(a, idx):
    """``out[i, ...] = a[i, idx[i, ...]]`` along the last axis of a matrix."""
    a = _t(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"pick needs a matrix and matching index rows, got {a.shape} and {idx.shape}")
    rows = np.arange(a.shape[0]).reshape((-1,) + (1,) * (idx.ndim - 1))
    data = a.data[rows, idx]

    def fn(g):
        n, m = a.shape
        flat = (np.broadcast_to(rows, idx.shape) * m + idx).reshape(-1)
        full = np.bincount(flat, weights=np.asarray(g, dtype=np.float64).reshape(-1), minlength=n * m)
        return (full.reshape(n, m),)

    return _make(data, (a,), fn)


def batched_matvec(A, x):
    """``out[b, i] = A[b, i, :] . x[b, :]`` for ``A`` of shape ``(B, n, d)`` and ``x`` of shape ``(B, d)``."""
    A, x = _t(A), _t(x)
    if A.data.ndim != 3 or x.data.ndim != 2 or A.shape[0] != x.shape[0] or A.shape[2] != x.shape[1]:
        raise ShapeError(f"batched_matvec shapes {A.shape} and {x.shape} are incompatible")
    Ad, xd = A.data, x.data
    data = np.einsum("bnd,bd->bn", Ad, xd)

    def fn(g):
        return (g[:, :, None] * xd[:, None, :], np.einsum("bn,bnd->bd", g, Ad))

    return _make(data, (A, x), fn)


def masked_fill(a, mask, value: float):
    """Replace entries where ``mask`` is true with a constant; those entries get zero gradient."""
    a = _t(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match tensor shape {a.shape}")
    return _make(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),))


# ----------------------------------------------------------- reductions


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = _t(a)
    shape = a.shape
    data = a.data.sum(axis=axis)

    def fn(g):
        if axis is None:
            return (np.full(shape, float(np.asarray(g).reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(data, (a,), fn)


def mean(a, axis=None):
    a = _t(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def max_pool(a, axis):
    """Maximum over ``axis``; the gradient goes to the first arg-max."""
    a = _t(a)
    ax = axis % a.data.ndim
    arg = np.argmax(a.data, axis=ax)
    data = np.take_along_axis(a.data, np.expand_dims(arg, ax), axis=ax).squeeze(ax)

    def fn(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(arg, ax), np.expand_dims(g, ax), axis=ax)
        return (full,)

    return _make(data, (a,), fn)


def segment_mean(a, segment_ids, n_segments: int):
    """Mean of the rows of ``a`` grouped by ``segment_ids``; empty segments give zeros."""
    a = _t(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if a.data.ndim != 2 or seg.shape != (a.shape[0],):
        raise ShapeError(f"segment_mean needs a matrix and one id per row, got {a.shape} and {seg.shape}")
    counts = np.bincount(seg, minlength=n_segments).astype(np.float64)
    denom = np.maximum(counts, 1.0)[:, None]
    data = scatter_rows(n_segments, seg, a.data) / denom

    def fn(g):
        return ((g / denom)[seg],)

    return _make(data, (a,), fn)
