"""A small reverse-mode automatic differentiation core on numpy arrays.

Only the operations the model needs are implemented. Every array is float64
so gradients can be checked against central finite differences.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A value in the computation graph.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    ``backward``; intermediate nodes do not keep their gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None

    # ------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ------------------------------------------------------------ operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _topological(root: Tensor) -> list:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                         _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _node(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[k] for k in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def index(a: Tensor, idx) -> Tensor:
    basic = _is_basic(idx)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _node(a.data[idx], (a,), bw)


def take(a: Tensor, rows) -> Tensor:
    """Gather rows along the first axis; ``rows`` may have any shape."""
    rows = np.asarray(rows, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows.ravel(), g.reshape((-1,) + a.shape[1:]))
        return (full,)

    return _node(a.data[rows], (a,), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    return _node(np.concatenate([t.data for t in ts], axis=ax), ts,
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------- composite


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _node(out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise unit normalisation over the last axis; zero rows stay zero."""
    n = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    ok = n > eps
    safe = np.where(ok, n, 1.0)
    out = np.where(ok, x.data / safe, 0.0)

    def bw(g):
        return (np.where(ok, (g - out * (g * out).sum(axis=-1, keepdims=True)) / safe, 0.0),)

    return _node(out, (x,), bw)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on NHWC input with an (kh, kw, C_in, C_out) kernel."""
    n, h, wd, c = x.shape
    kh, kw, cin, cout = w.shape
    if cin != c:
        raise ShapeError(f"conv2d expects {cin} input channels, got {c}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, kh, kw, c), (s0, s1 * stride, s2 * stride, s1, s2, s3))
    cols = patches.reshape(n * ho * wo, kh * kw * c)
    w2 = w.data.reshape(kh * kw * c, cout)
    out = (cols @ w2 + b.data).reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, c)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd, :]
        return gx, gw, gb

    return _node(out, (x, w, b), bw)


def pooling_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging weights of adaptive average pooling along one axis."""
    m = np.zeros((n_out, n_in))
    for k in range(n_out):
        lo = (k * n_in) // n_out
        hi = -((-(k + 1) * n_in) // n_out)
        m[k, lo:hi] = 1.0 / (hi - lo)
    return m


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling of NHWC input to ``out_h`` x ``out_w`` cells."""
    ph = pooling_matrix(x.shape[1], out_h)
    pw = pooling_matrix(x.shape[2], out_w)
    out = np.einsum("ah,nhwc,bw->nabc", ph, x.data, pw, optimize=True)
    return _node(out, (x,),
                 lambda g: (np.einsum("ah,nabc,bw->nhwc", ph, g, pw, optimize=True),))
