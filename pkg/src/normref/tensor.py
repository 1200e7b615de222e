"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the operators the refinement network and its losses need are provided.
Each op records a closure mapping the output gradient to parent gradients;
``backward`` walks the graph in reverse topological order and frees it.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw, "div")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,), "square")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)
    return _make(out, (x,), lambda g: (g * (out > 0),), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero wherever the clamp is active."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W (+ b)`` over the last axis; W may be (Cin, Cout) or batched."""
    x, W = as_tensor(x), as_tensor(W)
    if x.shape[-1] != W.shape[-2]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    if W.ndim == 2:
        out = (x.data.reshape(-1, x.shape[-1]) @ W.data).reshape(*x.shape[:-1], W.shape[-1])
    else:
        out = np.matmul(x.data, W.data)
    parents = (x, W)
    if b is not None:
        b = as_tensor(b)
        if b.shape[-1] != W.shape[-1]:
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        out += b.data
        parents = (x, W, b)

    def bw(g):
        gx = gW = gb = None
        if x.requires_grad:
            gx = _unbroadcast(np.matmul(g, np.swapaxes(W.data, -1, -2)), x.shape)
        if W.requires_grad:
            if W.ndim == 2:
                gW = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gW = _unbroadcast(np.matmul(np.swapaxes(x.data, -1, -2), g), W.shape)
        if b is not None and b.requires_grad:
            gb = _unbroadcast(g, b.shape)
        return (gx, gW) if b is None else (gx, gW, gb)

    return _make(out, parents, bw, "linear")


def cross3(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ShapeError(f"cross3: last axis must be 3, got {a.shape} and {b.shape}")
    _broadcast_shape("cross3", a, b)

    def bw(g):
        return (_unbroadcast(np.cross(b.data, g), a.shape) if a.requires_grad else None,
                _unbroadcast(np.cross(g, a.data), b.shape) if b.requires_grad else None)

    return _make(np.cross(a.data, b.data), (a, b), bw, "cross3")


def l2norm(x, axis: int = -1, keepdims: bool = True) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at zero is taken as zero."""
    x = as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gk * np.where(n > 0, x.data / safe, 0.0),)

    return _make(n if keepdims else np.squeeze(n, axis=axis), (x,), bw, "l2norm")


def normalize(x, axis: int = -1) -> Tensor:
    return div(x, l2norm(x, axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# Reductions and normalisations

def _axis_ok(op, x, axis):
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{op}: axis {axis} out of range for shape {x.shape}")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _axis_ok("softmax", x, axis)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),), "softmax")


def _max_first(x, axis):
    """(max, argmax) along ``axis``; argmax is the lowest maximising index."""
    if axis == x.ndim - 1 or x.shape[axis] > 64:
        idx = np.argmax(x, axis=axis)
        return np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis).squeeze(axis), idx
    # A running comparison over slices beats a strided argmax for short axes.
    view = np.moveaxis(x, axis, 0)
    best = view[0].copy()
    idx = np.zeros(best.shape, dtype=np.intp)
    for j in range(1, view.shape[0]):
        better = view[j] > best
        np.copyto(best, view[j], where=better)
        idx[better] = j
    return best, idx


def maxpool(x, axis: int, keepdims: bool = False) -> Tensor:
    """Max along ``axis``; gradient goes to the first (lowest-index) maximiser."""
    x = as_tensor(x)
    _axis_ok("maxpool", x, axis)
    axis = axis % x.ndim
    out, idx = _max_first(x.data, axis)
    idx = np.expand_dims(idx, axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, g if keepdims else np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(np.expand_dims(out, axis) if keepdims else out, (x,), bw, "maxpool")


# ---------------------------------------------------------------------------
# Shape manipulation

def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]} on axis {axis}") from None
    cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x, key) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), bw, "getitem")


def gather(x, indices, axis: int = 0) -> Tensor:
    """Select along ``axis`` with batch-aligned indices.

    ``indices`` has shape ``x.shape[:axis] + I``; the result has shape
    ``x.shape[:axis] + I + x.shape[axis+1:]``. The backward pass scatter-adds.
    """
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.int64)
    _axis_ok("gather", x, axis)
    axis = axis % x.ndim
    batch = x.shape[:axis]
    if indices.shape[:axis] != batch:
        raise ShapeError(f"gather: index batch shape {indices.shape[:axis]} does not match {batch}")
    n = x.shape[axis]
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of size {n}")
    rest = x.shape[axis + 1:]
    nb = int(np.prod(batch, dtype=np.int64))
    flat_src = x.data.reshape(nb * n, -1)
    offsets = (np.arange(nb, dtype=np.int64) * n).reshape(batch + (1,) * (indices.ndim - axis))
    flat_idx = (indices + offsets).ravel()
    out = flat_src[flat_idx].reshape(indices.shape + rest)

    def bw(g):
        g2 = g.reshape(len(flat_idx), -1)
        scatter = sp.csr_matrix(
            (np.ones(len(flat_idx)), (flat_idx, np.arange(len(flat_idx)))), shape=(nb * n, len(flat_idx))
        )
        return (np.asarray(scatter @ g2).reshape(x.shape),)

    return _make(out, (x,), bw, "gather")


def edge_max(a, q, indices, q2=None, edge=None) -> Tensor:
    """Fused edge-convolution reduction.

    ``out[b, i] = max_j relu(a[b, i] + q[b, n_ij] (+ edge[b, i, j])) (+ q2[b, n_ij])``
    with ``n_ij = indices[b, i, j]``. Equivalent to gather/add/relu/maxpool
    but iterates over neighbour slots instead of materialising (B, N, k, C).
    """
    a, q = as_tensor(a), as_tensor(q)
    q2 = None if q2 is None else as_tensor(q2)
    edge = None if edge is None else as_tensor(edge)
    indices = np.asarray(indices, dtype=np.int64)
    if a.ndim != 3 or q.ndim != 3 or indices.ndim != 3:
        raise ShapeError(f"edge_max: expected (B, N, C) inputs, got {a.shape}, {q.shape}, index {indices.shape}")
    B, nq, C = a.shape
    n = q.shape[1]
    k = indices.shape[2]
    if q.shape != (B, n, C) or indices.shape[:2] != (B, nq) or (q2 is not None and q2.shape != q.shape):
        raise ShapeError(f"edge_max: shapes {a.shape}, {q.shape}, index {indices.shape} are inconsistent")
    if edge is not None and edge.shape != (B, nq, k, C):
        raise ShapeError(f"edge_max: edge term shape {edge.shape} does not match {(B, nq, k, C)}")
    if indices.size and (indices.min() < 0 or indices.max() >= n):
        raise ShapeError(f"edge_max: index out of range for {n} points")
    flat = indices + (np.arange(B, dtype=np.int64) * n)[:, None, None]
    qf = q.data.reshape(B * n, C)
    q2f = None if q2 is None else q2.data.reshape(B * n, C)
    best = np.full((B, nq, C), -np.inf)
    arg = np.zeros((B, nq, C), dtype=np.int64)
    for j in range(k):
        rows = flat[:, :, j]
        val = np.take(qf, rows, axis=0)
        val += a.data
        if edge is not None:
            val += edge.data[:, :, j]
        np.maximum(val, 0.0, out=val)
        if q2f is not None:
            val += np.take(q2f, rows, axis=0)
        better = np.greater(val, best)
        np.copyto(best, val, where=better)
        np.copyto(arg, j, where=better)

    def bw(g):
        node = np.take_along_axis(flat, arg, axis=2)
        chan = np.arange(C, dtype=np.int64)
        slot = (node * C + chan).ravel()
        pre = a.data + qf[node, chan]
        if edge is not None:
            pre += np.take_along_axis(edge.data, arg[:, :, None, :], axis=2)[:, :, 0]
        g_act = g * (pre > 0)
        ga = g_act if a.requires_grad else None
        gq = np.bincount(slot, weights=g_act.ravel(), minlength=B * n * C).reshape(q.shape) \
            if q.requires_grad else None
        grads = [ga, gq]
        if q2 is not None:
            grads.append(np.bincount(slot, weights=g.ravel(), minlength=B * n * C).reshape(q.shape)
                         if q2.requires_grad else None)
        if edge is not None:
            ge = None
            if edge.requires_grad:
                ge = np.zeros(edge.shape)
                np.put_along_axis(ge, arg[:, :, None, :], g_act[:, :, None, :], axis=2)
            grads.append(ge)
        return tuple(grads)

    parents = (a, q) + ((q2,) if q2 is not None else ()) + ((edge,) if edge is not None else ())
    return _make(best, parents, bw, "edge_max")


# ---------------------------------------------------------------------------
# Backpropagation

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"loss is not finite ({loss.item()})")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64, copy=True).reshape(node.shape)
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {node.name or 'leaf tensor'}")
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------------------
# Finite-difference verification

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    worst: tuple  # (tensor position, flat coordinate)
    checked: int


def finite_diff_check(f, inputs, h: float = 1e-6, tol: float = 1e-4, max_coords: int | None = None,
                      rng: np.random.Generator | None = None, floor: float = 1e-5) -> GradCheckResult:
    """Compare backward gradients with central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from ``inputs``.
    The relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``;
    ``max_coords`` samples that many coordinates per input tensor.
    """
    inputs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for x in inputs:
        x.data = np.ascontiguousarray(x.data)
        x.grad = None
    backward(f())
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    rng = rng or np.random.default_rng(0)
    worst, worst_at, checked = 0.0, (None, None), 0
    for ti, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                fp = float(f().data)
                flat[c] = orig - h
                fm = float(f().data)
            flat[c] = orig
            num = (fp - fm) / (2.0 * h)
            ana = float(analytic[ti].reshape(-1)[c])
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            if not math.isfinite(rel):
                rel = math.inf
            if rel > worst:
                worst, worst_at = rel, (ti, int(c))
            checked += 1
    for x in inputs:
        x.grad = None
    return GradCheckResult(worst < tol, worst, worst_at, checked)
