"""Minimal reverse-mode differentiation over float64 numpy arrays.

Every primitive builds a node holding its operands and a closure that maps
the output adjoint to operand adjoints. :func:`backward` walks the graph in
reverse topological order exactly once.
"""
from __future__ import annotations

from typing import Callable, Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "as_tensor",
    "affine",
    "conv2d",
    "conv_transpose2d",
    "relu",
    "sigmoid",
    "softplus",
    "exp",
    "log",
    "clip",
    "add",
    "mul",
    "sum",
    "mean",
    "reshape",
    "concat",
    "crop2d",
    "backward",
    "grad",
    "finite_diff_check",
    "Adam",
]

DTYPE = np.float64


class Tensor:
    """An array node in a compute graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_adjoint")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents=(), _adjoint=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = tuple(_parents)
        self._adjoint = _adjoint

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operators
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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def square(self):
        return mul(self, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], adjoint: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, adjoint)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def adjoint(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), adjoint)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def adjoint(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), adjoint)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _node(out, (a,), lambda g: (g * _sigmoid(a.data),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; the adjoint is zero where the bound is active."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,))


# reductions and shape ----------------------------------------------------------

def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % a.ndim for ax in axes)
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return _node(out, (a,), adjoint)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def take(a, index) -> Tensor:
    a = as_tensor(a)

    def adjoint(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(a.data[index], (a,), adjoint)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.shape for t in ts]
        raise ValueError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def adjoint(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, ts, adjoint)


def crop2d(a, height: int, width: int) -> Tensor:
    """Center crop of the two trailing spatial axes."""
    a = as_tensor(a)
    H, W = a.shape[-2:]
    if height > H or width > W:
        raise ValueError(f"crop2d: cannot crop {a.shape} to {height}x{width}")
    top, left = (H - height) // 2, (W - width) // 2
    return take(a, (Ellipsis, slice(top, top + height), slice(left, left + width)))


# dense and convolutional layers ----------------------------------------------

def affine(x, w, b=None) -> Tensor:
    """x @ w + b for x of shape (N, in) and w of shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"affine: input {x.shape} incompatible with weight {w.shape}")
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ValueError(f"affine: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        parents.append(b)

    def adjoint(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, adjoint)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # x is already padded: (N, C, H, W) -> (N*oh*ow, C*kh*kw)
    N, C = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(N * oh * ow, C * kh * kw)


def _col2im(cols: np.ndarray, shape, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    # inverse scatter of _im2col: accumulates overlapping windows
    N, C = shape[:2]
    cols = cols.reshape(N, oh, ow, C, kh, kw)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return out


def _check_conv_args(kernel_shape, stride, padding, op):
    if stride < 1 or padding < 0 or min(kernel_shape) < 1:
        raise ValueError(f"{op}: invalid kernel {kernel_shape}, stride {stride}, padding {padding}")


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with weight (out, in, kh, kw) on input (N, in, H, W)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    F, C, kh, kw = w.shape
    _check_conv_args((kh, kw), stride, padding, "conv2d")
    N, _, H, W = x.shape
    oh, ow = _out_size(H, kh, stride, padding), _out_size(W, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(N, oh, ow, F).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (F,):
            raise ValueError(f"conv2d: bias {b.shape} does not match {F} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def adjoint(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, F)
        dw = (g2.T @ cols).reshape(w.shape)
        dxp = _col2im(g2 @ wmat, xp.shape, kh, kw, stride, oh, ow)
        dx = dxp[:, :, p : p + H, p : p + W] if p else dxp
        grads = [dx, dw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _node(np.ascontiguousarray(out), parents, adjoint)


def conv_transpose2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of conv2d w.r.t. its input; weight has shape (in, out, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: input {x.shape} incompatible with weight {w.shape}")
    C, F, kh, kw = w.shape
    _check_conv_args((kh, kw), stride, padding, "conv_transpose2d")
    N, _, H, W = x.shape
    hf, wf = (H - 1) * stride + kh, (W - 1) * stride + kw
    p = padding
    if hf - 2 * p < 1 or wf - 2 * p < 1:
        raise ValueError(f"conv_transpose2d: padding {p} leaves no output for input {x.shape}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wmat = w.data.reshape(C, -1)
    full = _col2im(xm @ wmat, (N, F, hf, wf), kh, kw, stride, H, W)
    out = full[:, :, p : hf - p, p : wf - p]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (F,):
            raise ValueError(f"conv_transpose2d: bias {b.shape} does not match {F} output channels")
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def adjoint(g):
        gfull = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p))) if p else g
        dcols = _im2col(gfull, kh, kw, stride, H, W)
        dx = (dcols @ wmat.T).reshape(N, H, W, C).transpose(0, 3, 1, 2)
        dw = (xm.T @ dcols).reshape(w.shape)
        grads = [dx, dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(np.ascontiguousarray(out), parents, adjoint)


# backward ----------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> Dict[int, np.ndarray]:
    """Populate ``.grad`` on every leaf with ``requires_grad`` reachable from ``root``.

    Returns a mapping from ``id(leaf)`` to its gradient. Leaves not connected
    to the root keep ``grad = None``; see :func:`grad` for a zero-filled view.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    order = _topological(root)
    adj: Dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=DTYPE)}
    leaves: Dict[int, np.ndarray] = {}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            node.grad = g
            leaves[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._adjoint(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in adj:
                adj[key] = adj[key] + pg
            else:
                adj[key] = pg
    return leaves


def grad(f: Callable[..., Tensor], *args: np.ndarray) -> Tuple[np.ndarray, ...]:
    """Gradients of scalar ``f`` with respect to each array argument."""
    leaves = [Tensor(a, requires_grad=True) for a in args]
    backward(f(*leaves))
    return tuple(np.zeros_like(t.data) if t.grad is None else t.grad for t in leaves)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    x = np.array(x, dtype=DTYPE)
    (analytic,) = grad(f, x)
    numeric = np.empty_like(x)
    flat, out = x.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(Tensor(x)))
        flat[i] = orig - step
        lo = float(f(Tensor(x)))
        flat[i] = orig
        out[i] = (hi - lo) / (2 * step)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(np.max(err)) if not np.isnan(err).any() else float("nan")


class Adam:
    """Adaptive-moment first-order optimizer over a list of arrays (updated in place)."""

    def __init__(self, params: Iterable[np.ndarray], lr: float = 1e-3,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
