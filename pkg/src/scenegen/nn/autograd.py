"""A small reverse-mode automatic differentiation engine over numpy arrays.

Each :class:`Tensor` remembers its parents and a closure that pushes the
output gradient back to them.  ``loss.backward()`` walks the graph in reverse
topological order.  Gradients of leaves accumulate across calls; gradients of
intermediate nodes are released as soon as they have been propagated.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # --- graph plumbing ---------------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accum(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = g.copy() if self._backward is None else g
        else:
            self.grad = self.grad + g

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self, grad=None) -> None:
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        order, seen, stack = [], set(), [(self, False)]
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
        g0 = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        self._accum(g0)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            node.grad = None
            node._parents = ()
            node._backward = None

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # --- conveniences -------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return tsum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes if axes else None)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def back(g):
        a._accum(g)
        b._accum(g)
    return Tensor._make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def back(g):
        a._accum(g)
        b._accum(-g)
    return Tensor._make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def back(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)
    return Tensor._make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a, b if isinstance(b, Tensor) else None), as_tensor(b, a if isinstance(a, Tensor) else None)

    def back(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * a.data / (b.data * b.data))
    return Tensor._make(a.data / b.data, (a, b), back)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: x._accum(g * y))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: x._accum(g / x.data))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor._make(y, (x,), lambda g: x._accum(g * (1.0 - y * y)))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(y, (x,), lambda g: x._accum(g * y * (1.0 - y)))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: x._accum(g * mask))


# --- shape ----------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(x.data.shape)))


def transpose(x: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(np.transpose(x.data, axes), (x,), lambda g: x._accum(np.transpose(g, inv)))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        x._accum(full)
    return Tensor._make(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g):
        for x, part in zip(xs, np.split(g, sizes, axis=axis)):
            x._accum(part)
    return Tensor._make(np.concatenate([x.data for x in xs], axis=axis), xs, back)


def split(x: Tensor, n: int, axis: int = 0) -> list[Tensor]:
    size = x.shape[axis] // n
    out = []
    for i in range(n):
        sl = [slice(None)] * x.ndim
        sl[axis] = slice(i * size, (i + 1) * size)
        out.append(getitem_slice(x, tuple(sl)))
    return out


def getitem_slice(x: Tensor, sl) -> Tensor:
    """Basic-slice indexing; the backward writes into a zero array without ``add.at``."""
    def back(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        x._accum(full)
    return Tensor._make(x.data[sl], (x,), back)


# --- reductions -------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.data.shape))
    return Tensor._make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.data.shape[a] for a in np.atleast_1d(axis)]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accum(np.swapaxes(a.data, -1, -2) @ g)
    return Tensor._make(a.data @ b.data, (a, b), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def back(g):
        x._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))
    return Tensor._make(y, (x,), back)


def function(x: Tensor, fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]) -> Tensor:
    """Wrap a black-box ``fn(x) -> (y, dy/dx)`` whose output is elementwise over leading axes.

    ``y`` has shape ``x.shape[:-1]`` and the Jacobian is row-local: ``dy[i]/dx[i, :]``.
    """
    y, jac = fn(x.data)

    def back(g):
        x._accum(g[..., None] * jac)
    return Tensor._make(np.asarray(y), (x,), back)


# --- convolution and normalization ----------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Patch matrix of shape (C*k*k, N*H*W); rows follow (c, di, dj), columns are output pixels."""
    n, c, h, w = x.shape
    if k == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * k * k, n * h * w)


def _col2im(cols: np.ndarray, shape, k: int) -> np.ndarray:
    n, c, h, w = shape
    if k == 1:
        return cols.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    p = k // 2
    cols = cols.reshape(c, k, k, n, h, w)
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + h, j:j + w] += cols[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, p:p + h, p:p + w]


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-size 2-D convolution (cross-correlation) with zero padding ``k // 2``.

    ``x``: (N, C, H, W); ``w``: (O, C, k, k) with odd ``k``; ``b``: (O,).
    Narrow layers (``O <= C``) use shifted matrix products over a flattened padded
    image; the rest use an explicit patch matrix.  Both compute the same thing.
    """
    n, c, h, wd = x.shape
    o, ci, k, k2 = w.shape
    if ci != c or k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    if k > 1 and o <= c:
        return _conv2d_shift(x, w, b)
    cols = _im2col(x.data, k)
    w2 = w.data.reshape(o, c * k * k)
    out = (w2 @ cols).reshape(o, n, h, wd)
    if b is not None:
        out += b.data[:, None, None, None]
    y = out.transpose(1, 0, 2, 3)
    if n > 1:
        y = np.ascontiguousarray(y)

    def back(g):
        go = g.transpose(1, 0, 2, 3).reshape(o, n * h * wd)
        if w.requires_grad:
            w._accum((go @ cols.T).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            b._accum(go.sum(axis=1))
        if x.requires_grad:
            x._accum(_col2im(w2.T @ go, x.data.shape, k))
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(y, parents, back)


def _conv2d_shift(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    # Lay the zero-padded images end to end as (C, N*S).  Output pixel q reads
    # input q + i*W2 + j for tap (i, j), so each tap is one matrix product on a
    # contiguous slice.  Positions in the padding band are computed and dropped.
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    h2, w2 = h + 2 * p, wd + 2 * p
    span = n * h2 * w2
    xp = np.zeros((c, span + 2 * p * w2 + 2 * p), dtype=x.data.dtype)
    xp[:, :span].reshape(c, n, h2, w2)[:, :, p:p + h, p:p + wd] = x.data.transpose(1, 0, 2, 3)
    taps = [(i * w2 + j, np.ascontiguousarray(w.data[:, :, i, j])) for i in range(k) for j in range(k)]
    out = np.zeros((o, span), dtype=x.data.dtype)
    for off, wij in taps:
        out += wij @ xp[:, off:off + span]
    y = out.reshape(o, n, h2, w2)[:, :, :h, :wd].transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.data[None, :, None, None]
    y = np.ascontiguousarray(y)

    def back(g):
        gp = np.zeros((o, span), dtype=x.data.dtype)
        gp.reshape(o, n, h2, w2)[:, :, :h, :wd] = g.transpose(1, 0, 2, 3)
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))
        if w.requires_grad:
            dw = np.empty(w.data.shape, dtype=x.data.dtype)
            for i in range(k):
                for j in range(k):
                    off = i * w2 + j
                    dw[:, :, i, j] = gp @ xp[:, off:off + span].T
            w._accum(dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for off, wij in taps:
                dxp[:, off:off + span] += wij.T @ gp
            dx = dxp[:, :span].reshape(c, n, h2, w2)[:, :, p:p + h, p:p + wd].transpose(1, 0, 2, 3)
            x._accum(np.ascontiguousarray(dx))
    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(y, parents, back)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    n, c, h, w = x.shape
    if c % groups:
        raise ValueError(f"{c} channels do not split into {groups} groups")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(n, c, h, w)
    y = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def back(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxh = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
            xh = xhat.reshape(n, groups, -1)
            dx = inv * (dxh - dxh.mean(axis=2, keepdims=True) - xh * (dxh * xh).mean(axis=2, keepdims=True))
            x._accum(dx.reshape(n, c, h, w))
    return Tensor._make(y, (x, gamma, beta), back)
