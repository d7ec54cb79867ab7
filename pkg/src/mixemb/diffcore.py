"""Small reverse-mode autodiff engine on top of numpy (float64 only).

A :class:`Tensor` records the operation that produced it together with a
closure mapping the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order.  Graphs are rebuilt on every forward pass and never persisted.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonFiniteError, NormError, RangeError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, detail="implicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(op: str, data, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``; ``backward(g)`` returns one gradient per parent."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, op=op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise arithmetic

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)
    return make_op("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)
    return make_op("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)
    out = a.data / b.data
    return make_op("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    a = as_tensor(a)
    return make_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float):
    a = as_tensor(a)
    return make_op("pow", a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


# unary nonlinearities

def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return make_op("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a):
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_op("exp", y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return make_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return make_op("sqrt", y, (a,), lambda g: (g * 0.5 / y,))


def clamp_min(a, lo: float):
    """max(a, lo) with the gradient routed only through unclamped entries."""
    a = as_tensor(a)
    keep = a.data > lo
    return make_op("clamp_min", np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


# reductions and softmax

def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op("sum", out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return make_op("softmax", y, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    # the max term contributes exactly 1; log1p of the rest keeps tiny losses exact
    top = np.expand_dims(np.argmax(z, axis=axis), axis)
    np.put_along_axis(e, top, 0.0, axis=axis)
    lse = np.log1p(e.sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_op("log_softmax", y, (a,),
                   lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# shape manipulation

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return make_op("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return make_op("swapaxes", np.swapaxes(a.data, ax1, ax2), (a,),
                   lambda g: (np.swapaxes(g, ax1, ax2),))


def slice_(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op("slice", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis=0):
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
                t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError("concat", ts[0].shape, t.shape)
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return make_op("concat", out, ts, bw)


# linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim == 1:
                gb = np.outer(a.data, g)
            elif b.ndim == 2:
                # fold the batch axes into one BLAS call
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_op("matmul", out, (a, b), bw)


def l2_normalize(a, axis=-1, eps=1e-12):
    """Scale every slice along ``axis`` to unit Euclidean norm."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if np.any(norm < eps):
        raise NormError(f"l2_normalize: slice norm below eps={eps:g}")
    y = a.data / norm
    return make_op("l2_normalize", y, (a,),
                   lambda g: ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,))


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    """Cosine between ``a`` and ``b`` along ``axis`` (broadcasting elsewhere)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("cosine_similarity", a, b)
    return sum_(l2_normalize(a, axis, eps) * l2_normalize(b, axis, eps), axis=axis)


def conv1d(x, w, b=None, padding=None):
    """1-D convolution with stride 1 over channel-last input.

    x: (B, T, C_in); w: (K, C_in, C_out); b: (C_out,).
    ``padding`` is the zero padding added on each side; default keeps T.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    K, cin, cout = w.shape
    if padding is None:
        pl, pr = (K - 1) // 2, K - 1 - (K - 1) // 2
    else:
        pl = pr = int(padding)
    B, T, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (pl, pr), (0, 0))) if (pl or pr) else x.data
    t_out = xp.shape[1] - K + 1
    if t_out < 1:
        raise ShapeError("conv1d", x.shape, w.shape, detail="input shorter than kernel")
    cols = np.stack([xp[:, k:k + t_out] for k in range(K)], axis=2).reshape(B * t_out, K * cin)
    w2 = w.data.reshape(K * cin, cout)
    out = (cols @ w2).reshape(B, t_out, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv1d", b.shape, (cout,), detail="bias")
        out = out + b.data
        parents.append(b)

    def bw(g):
        g2 = g.reshape(B * t_out, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, t_out, K, cin)
            gxp = np.zeros_like(xp)
            for k in range(K):
                gxp[:, k:k + t_out] += gcols[:, :, k]
            gx = gxp[:, pl:pl + T]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_op("conv1d", out, parents, bw)


def overlap_add(frames, hop: int):
    """Overlap-add (B, N, W) frames with stride ``hop`` into (B, (N-1)*hop + W)."""
    frames = as_tensor(frames)
    B, N, W = frames.shape
    L = (N - 1) * hop + W
    out = np.zeros((B, L))
    for n in range(N):
        out[:, n * hop:n * hop + W] += frames.data[:, n]

    def bw(g):
        idx = np.arange(N)[:, None] * hop + np.arange(W)[None, :]
        return (g[:, idx],)

    return make_op("overlap_add", out, (frames,), bw)


# verification and optimization

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central-difference gradients of ``f`` at ``x``."""
    if not 1e-7 <= eps <= 1e-4:
        raise RangeError(f"grad_check: eps={eps} outside [1e-7, 1e-4]")
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("grad_check: f(x) is not finite")
    y.backward()
    g_auto = xt.grad if xt.grad is not None else np.zeros_like(x0)
    g_fd = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            xm = flat.copy()
            xm[i] -= eps
            fp = float(f(Tensor(xp.reshape(x0.shape))).data)
            fm = float(f(Tensor(xm.reshape(x0.shape))).data)
            g_fd.reshape(-1)[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(g_auto), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_auto - g_fd) / denom))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params[name].data``."""
    if state.lr <= 0:
        raise RangeError(f"adam_step: lr must be positive, got {state.lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


class Adam:
    """Convenience wrapper binding a parameter dict to an :class:`AdamState`."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {n: p.grad for n, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state)


def clip_grad_norm(params: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return total
