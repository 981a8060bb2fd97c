"""A small reverse-mode differentiation engine over numpy float64 arrays.

Each op builds its output eagerly and records a closure mapping the output
gradient to input gradients. ``backward`` walks the graph once in reverse
topological order. Leaf tensors with ``requires_grad`` accumulate into
``.grad``; intermediate gradients live only for the duration of the pass.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from specdiff.errors import ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- bookkeeping ----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)

    # -- operator sugar -------------------------------------------------------
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
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def abs(self):
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
    if grad is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    grads = {id(loss): np.asarray(grad, dtype=np.float64)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),))


def tabs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient passes only where ``a > floor``."""
    keep = a.data > floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (np.where(keep, g, 0.0),))


def magnitude(re: Tensor, im: Tensor) -> Tensor:
    """``sqrt(re**2 + im**2)`` with the gradient taken as zero at the origin."""
    out = np.hypot(re.data, im.data)
    safe = np.where(out > 0, out, 1.0)
    scale = np.where(out > 0, 1.0 / safe, 0.0)
    return _make(out, (re, im), lambda g: (g * re.data * scale, g * im.data * scale))


def rfft_magnitude(a: Tensor) -> Tensor:
    """``|rfft(a)|`` over the last axis (even length); zero gradient at empty bins."""
    n = a.shape[-1]
    if n % 2:
        raise ShapeError("rfft_magnitude needs an even transform length")
    spec = np.fft.rfft(a.data, axis=-1)
    out = np.abs(spec)

    def fn(g):
        scale = np.divide(g, out, out=np.zeros_like(out), where=out > 0)
        z = spec * scale
        z[..., 1:-1] *= 0.5
        return (n * np.fft.irfft(z, n=n, axis=-1),)

    return _make(out, (a,), fn)


# -- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate on the way back."""

    def fn(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), fn)


def pad(a: Tensor, widths) -> Tensor:
    """Zero padding, ``widths`` as for ``np.pad``."""
    widths = [tuple(w) for w in widths]
    crop = tuple(slice(lo, lo + n) for (lo, _), n in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[crop],))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), fn)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")

    def fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), fn)


# -- convolutions -----------------------------------------------------------

def _zero_pad(x: np.ndarray, pads: Sequence[int]) -> np.ndarray:
    """Pad the trailing ``len(pads)`` axes symmetrically with zeros."""
    if not any(pads):
        return x
    lead = x.ndim - len(pads)
    shape = x.shape[:lead] + tuple(n + 2 * p for n, p in zip(x.shape[lead:], pads))
    out = np.zeros(shape)
    out[(Ellipsis,) + tuple(slice(p, p + n) for n, p in zip(x.shape[lead:], pads))] = x
    return out


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """``x`` (B, C, T), ``w`` (O, C, K) -> (B, O, T_out); zero padding."""
    B, C, T = x.shape
    O, Cw, K = w.shape
    if C != Cw:
        raise ShapeError(f"conv1d: input has {C} channels, weight expects {Cw}")
    xp = _zero_pad(x.data, (padding,))
    span = (K - 1) * dilation + 1
    if xp.shape[2] < span:
        raise ShapeError("conv1d: input shorter than the dilated kernel")
    To = (xp.shape[2] - span) // stride + 1
    s0, s1, s2 = xp.strides
    cols = as_strided(xp, (C, K, B, To), (s1, s2 * dilation, s0, s2 * stride)).reshape(C * K, B * To)
    w2 = w.data.reshape(O, C * K)
    out = (w2 @ cols).reshape(O, B, To).transpose(1, 0, 2)
    if b is not None:
        out = out + b.data[None, :, None]

    def fn(g):
        g2 = g.transpose(1, 0, 2).reshape(O, B * To)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, K, B, To).transpose(2, 0, 1, 3)
            gxp = np.zeros_like(xp)
            for k in range(K):
                start = k * dilation
                gxp[:, :, start:start + stride * (To - 1) + 1:stride] += gcols[:, :, k]
            gx = gxp[:, :, padding:padding + T]
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, fn)


def conv_transpose1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """``x`` (B, C, T), ``w`` (C, O, K) -> (B, O, (T-1)*stride + K - 2*padding)."""
    B, C, T = x.shape
    Cw, O, K = w.shape
    if C != Cw:
        raise ShapeError(f"conv_transpose1d: input has {C} channels, weight expects {Cw}")
    full_len = (T - 1) * stride + K
    xt = x.data.transpose(0, 2, 1)  # B,T,C
    w2 = w.data.reshape(C, O * K)
    y = (xt @ w2).reshape(B, T, O, K)
    full = np.zeros((B, O, full_len))
    for k in range(K):
        full[:, :, k:k + stride * (T - 1) + 1:stride] += y[:, :, :, k].transpose(0, 2, 1)
    out = full[:, :, padding:full_len - padding]
    if b is not None:
        out = out + b.data[None, :, None]

    def fn(g):
        gfull = np.zeros((B, O, full_len))
        gfull[:, :, padding:full_len - padding] = g
        gy = np.empty((B, T, O, K))
        for k in range(K):
            gy[:, :, :, k] = gfull[:, :, k:k + stride * (T - 1) + 1:stride].transpose(0, 2, 1)
        gy2 = gy.reshape(B * T, O * K)
        gx = (gy2 @ w2.T).reshape(B, T, C).transpose(0, 2, 1) if x.requires_grad else None
        gw = (xt.reshape(B * T, C).T @ gy2).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, fn)


def _correlate2d(xp: np.ndarray, w: np.ndarray, stride=(1, 1)) -> tuple[np.ndarray, np.ndarray]:
    """Valid 2-D cross-correlation of padded ``xp`` (B, C, H, W) with ``w`` (O, C, kh, kw).

    Returns the output and the im2col matrix used to compute it.
    """
    B, C, H, W = xp.shape
    O, _, kh, kw = w.shape
    sh, sw = stride
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1
    s0, s1, s2, s3 = xp.strides
    cols = as_strided(xp, (C, kh, kw, B, Ho, Wo),
                      (s1, s2, s3, s0, s2 * sh, s3 * sw)).reshape(C * kh * kw, B * Ho * Wo)
    out = (w.reshape(O, -1) @ cols).reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3)
    return out, cols


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), padding=(0, 0)) -> Tensor:
    """``x`` (B, C, H, W), ``w`` (O, C, kh, kw) -> (B, O, H_out, W_out); zero padding."""
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input has {C} channels, weight expects {Cw}")
    sh, sw = stride
    ph, pw = padding
    xp = _zero_pad(x.data, (ph, pw))
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError("conv2d: input smaller than kernel")
    out, cols = _correlate2d(xp, w.data, (sh, sw))
    Ho, Wo = out.shape[2], out.shape[3]
    if b is not None:
        out = out + b.data[None, :, None, None]

    def fn(g):
        gw = None
        if w.requires_grad:
            gw = (g.transpose(1, 0, 2, 3).reshape(O, -1) @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            # input gradient = full correlation of the stride-dilated output
            # gradient with the flipped, channel-swapped kernel
            gd = np.zeros((B, O, (Ho - 1) * sh + 2 * kh - 1, (Wo - 1) * sw + 2 * kw - 1))
            gd[:, :, kh - 1:kh - 1 + (Ho - 1) * sh + 1:sh, kw - 1:kw - 1 + (Wo - 1) * sw + 1:sw] = g
            wf = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            full, _ = _correlate2d(gd, wf)
            gxp = np.zeros_like(xp)
            gxp[:, :, :full.shape[2], :full.shape[3]] = full
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, fn)
