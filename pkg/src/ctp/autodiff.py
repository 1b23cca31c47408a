"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure producing the vector-Jacobian product.  Calling :func:`backward` on a
scalar walks the recorded graph once, accumulates ``.grad`` on leaves and
then releases the graph.

Arithmetic runs in float32 unless :func:`default_dtype` switches to float64,
which the gradient checks use.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "NumericError", "ShapeError", "GraphReleasedError",
    "default_dtype", "get_default_dtype", "no_grad", "is_grad_enabled",
    "tensor", "parameter", "backward",
    "matmul", "spmm", "add", "sub", "mul", "div", "neg", "scale",
    "concat", "mean_rows", "max_rows", "sum_all", "mean_all",
    "sigmoid", "log_sigmoid", "relu", "leaky_relu", "exp", "log", "square",
    "softmax_rows", "log_softmax_rows", "l2_normalize_rows", "cosine_sim",
    "dropout", "gather_rows", "scatter_sum", "scatter_mean", "segment_softmax",
    "pick", "row_dot", "reshape",
]

NORM_EPS = 1e-12

_DTYPE = [np.float32]
_GRAD_ENABLED = [True]


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


class GraphReleasedError(RuntimeError):
    """Raised on a second backward pass over an already consumed graph."""


def get_default_dtype():
    return _DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = _DTYPE[0]
    _DTYPE[0] = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE[0] = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op", "_released")

    def __init__(self, data, requires_grad: bool = False, *, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE[0])
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._vjp: Callable | None = None
        self.op = "leaf"
        self._released = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather_rows(self, idx)


def tensor(data, dtype=None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._released = False
    track = _GRAD_ENABLED[0] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded graph is released afterwards; a second call raises.
    """
    if loss._released:
        raise GraphReleasedError("backward: graph already consumed; run a new forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        loss._released = True
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if not np.isfinite(g).all():
                raise NumericError("backward: NaN or Inf in gradient")
            node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    for node in order:
        if node._parents:
            node._parents = ()
            node._vjp = None
            node._released = True
    loss._released = True


# ---------------------------------------------------------------------------
# linear algebra / structure


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make("matmul", ad @ bd, (a, b), vjp)


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense tensor."""
    x = _as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: cannot multiply {matrix.shape} by {x.shape}")
    mt = matrix.T.tocsr()

    def vjp(g):
        return (np.asarray(mt @ g, dtype=x.data.dtype),)

    out = np.asarray(matrix @ x.data, dtype=x.data.dtype)
    return _make("spmm", out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make("reshape", x.data.reshape(shape), (x,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        res = []
        for i, t in enumerate(ts):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)] if t.requires_grad else None)
        return tuple(res)

    return _make("concat", out, ts, vjp)


def gather_rows(x, index) -> Tensor:
    x = _as_tensor(x)
    if isinstance(index, slice):
        idx = np.arange(x.shape[0])[index]
    else:
        idx = np.asarray(index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
    idx = idx.astype(np.int64)
    if idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _make("gather_rows", x.data[idx], (x,), vjp)


def pick(x, rows, cols) -> Tensor:
    """Elementwise ``x[rows[i], cols[i]]`` as a 1-d tensor."""
    x = _as_tensor(x)
    r = np.asarray(rows, dtype=np.int64)
    c = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, (r, c), g)
        return (out,)

    return _make("pick", x.data[r, c], (x,), vjp)


def _segment_matrix(index: np.ndarray, num_segments: int, dtype) -> sp.csr_matrix:
    n = len(index)
    return sp.csr_matrix((np.ones(n, dtype=dtype), (index, np.arange(n))), shape=(num_segments, n))


def scatter_sum(src, index, num_segments: int) -> Tensor:
    """Row ``i`` of ``src`` is added into output row ``index[i]``."""
    src = _as_tensor(src)
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) != src.shape[0]:
        raise ShapeError(f"scatter_sum: {len(idx)} indices for {src.shape[0]} rows")
    seg = _segment_matrix(idx, num_segments, src.data.dtype)
    data = src.data if src.ndim == 2 else src.data[:, None]
    out = np.asarray(seg @ data, dtype=src.data.dtype)
    if src.ndim == 1:
        out = out[:, 0]

    def vjp(g):
        return (g[idx],)

    return _make("scatter_sum", out, (src,), vjp)


def scatter_mean(src, index, num_segments: int) -> Tensor:
    """Mean of the rows of ``src`` sharing a segment index; empty segments are 0."""
    src = _as_tensor(src)
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) != src.shape[0]:
        raise ShapeError(f"scatter_mean: {len(idx)} indices for {src.shape[0]} rows")
    counts = np.bincount(idx, minlength=num_segments).astype(src.data.dtype)
    inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0).astype(src.data.dtype)
    seg = _segment_matrix(idx, num_segments, src.data.dtype)
    data = src.data if src.ndim == 2 else src.data[:, None]
    out = np.asarray(seg @ data, dtype=src.data.dtype) * inv[:, None]
    if src.ndim == 1:
        out = out[:, 0]

    def vjp(g):
        scaled = g * (inv[:, None] if g.ndim == 2 else inv)
        return (scaled[idx],)

    return _make("scatter_mean", out, (src,), vjp)


def segment_softmax(scores, index, num_segments: int) -> Tensor:
    """Softmax of a 1-d score vector within each segment."""
    s = _as_tensor(scores)
    if s.ndim != 1:
        raise ShapeError(f"segment_softmax: expected 1-d scores, got {s.shape}")
    idx = np.asarray(index, dtype=np.int64)
    if len(idx) != len(s.data):
        raise ShapeError(f"segment_softmax: {len(idx)} indices for {len(s.data)} scores")
    seg_max = np.full(num_segments, -np.inf, dtype=s.data.dtype)
    np.maximum.at(seg_max, idx, s.data)
    e = np.exp(s.data - seg_max[idx])
    denom = np.bincount(idx, weights=e, minlength=num_segments).astype(s.data.dtype)
    alpha = (e / denom[idx]).astype(s.data.dtype)

    def vjp(g):
        dot = np.bincount(idx, weights=alpha * g, minlength=num_segments)
        return ((alpha * (g - dot[idx])).astype(g.dtype),)

    return _make("segment_softmax", alpha, (s,), vjp)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return _make("mul", ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)

    return _make("div", out, (a, b), vjp)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    f = x.data.dtype.type(factor)
    return _make("scale", x.data * f, (x,), lambda g: (g * f,))


def square(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    return _make("square", xd * xd, (x,), lambda g: (2 * g * xd,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def log_sigmoid(x) -> Tensor:
    """Numerically stable ``log(sigmoid(x))``."""
    x = _as_tensor(x)
    xd = x.data
    out = np.minimum(xd, 0) - np.log1p(np.exp(-np.abs(xd)))
    sig_neg = np.empty_like(xd)  # sigmoid(-x)
    pos = xd >= 0
    ex = np.exp(-xd[pos])
    sig_neg[pos] = ex / (1.0 + ex)
    sig_neg[~pos] = 1.0 / (1.0 + np.exp(xd[~pos]))
    return _make("log_sigmoid", out.astype(xd.dtype), (x,), lambda g: (g * sig_neg,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make("leaky_relu", x.data * factor, (x,), lambda g: (g * factor,))


def dropout(x, rate: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or outside training."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return x
    if rng is None:
        raise ValueError("dropout: an explicit rng is required when rate > 0")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _make("sum", np.asarray(x.data.sum(), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    if n == 0:
        raise ShapeError("mean_all: empty tensor")
    return _make("mean", np.asarray(x.data.mean(), dtype=x.data.dtype), (x,),
                 lambda g: (np.broadcast_to(g / n, shape).copy(),))


def row_dot(a, b) -> Tensor:
    """Row-wise inner products of two equally shaped matrices."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"row_dot: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g[:, None] * bd if a.requires_grad else None,
                g[:, None] * ad if b.requires_grad else None)

    return _make("row_dot", np.einsum("ij,ij->i", ad, bd), (a, b), vjp)


def mean_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"mean_rows: expected non-empty matrix, got {x.shape}")
    n = x.shape[0]
    return _make("mean_rows", x.data.mean(axis=0), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def max_rows(x) -> Tensor:
    """Column-wise max over rows; ties route the gradient to the first row."""
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ShapeError(f"max_rows: expected non-empty matrix, got {x.shape}")
    arg = x.data.argmax(axis=0)
    cols = np.arange(x.shape[1])
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        out[arg, cols] = g
        return (out,)

    return _make("max_rows", x.data[arg, cols], (x,), vjp)


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows: expected matrix, got {x.shape}")
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make("softmax_rows", out, (x,), vjp)


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"log_softmax_rows: expected matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax_rows", out, (x,), vjp)


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``max(||row||, eps)``; zero rows stay zero."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows: expected matrix, got {x.shape}")
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps).astype(xd.dtype)
    out = xd / denom

    def vjp(g):
        proj = np.where(big, (g * out).sum(axis=1, keepdims=True), 0.0)
        return ((g - out * proj) / denom,)

    return _make("l2_normalize_rows", out, (x,), vjp)


def cosine_sim(a, b, eps: float = NORM_EPS) -> Tensor:
    """Pairwise cosine similarities ``[len(a) x len(b)]``; zero rows give 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim == 1:
        a = reshape(a, (1, -1))
    if b.ndim == 1:
        b = reshape(b, (1, -1))
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_sim: feature widths differ, {a.shape} vs {b.shape}")
    na = l2_normalize_rows(a, eps)
    nb = l2_normalize_rows(b, eps)
    return matmul(na, transpose(nb))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    return _make("transpose", x.data.T, (x,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# gradient checking


def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, delta: float = 1e-5,
                       probes: Iterable[tuple] | None = None) -> dict[tuple, float]:
    """Central differences of the scalar ``fn()`` at selected entries of ``x``.

    ``fn`` must read ``x.data`` freshly on every call.
    """
    if probes is None:
        probes = list(np.ndindex(*x.shape))
    out = {}
    with no_grad():
        for idx in probes:
            orig = x.data[idx]
            x.data[idx] = orig + delta
            up = float(fn().data)
            x.data[idx] = orig - delta
            down = float(fn().data)
            x.data[idx] = orig
            out[tuple(idx)] = (up - down) / (2 * delta)
    return out
