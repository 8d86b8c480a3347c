"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor records the op that produced it; ``backward()`` runs the tape in
reverse topological order.  Primitives cover exactly what the denoiser
networks need: broadcast arithmetic, matmul (batched), reductions, conv2d
via im2col, nearest-neighbor upsampling, softmax, SiLU, concat, dropout.
Everything runs in float64 so gradients can be checked against central
finite differences tightly.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

# float64 keeps finite-difference checks tight; heavy training/sampling runs
# may switch to float32 for speed via compute_dtype().
_DTYPE = np.float64


@contextmanager
def compute_dtype(dtype):
    global _DTYPE
    previous = _DTYPE
    _DTYPE = dtype
    try:
        yield
    finally:
        _DTYPE = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data, dtype=_DTYPE) if bw is None else data
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Backpropagate from this (scalar) tensor through the tape."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g, self.data.shape))
            other._accumulate(_unbroadcast(g, other.data.shape))

        return Tensor(self.data + other.data, (self, other), bw)

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bw(g):
            self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        return Tensor(self.data * other.data, (self, other), bw)

    def __neg__(self):
        return self * (-1.0)

    def __sub__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    __radd__ = __add__
    __rmul__ = __mul__

    def __pow__(self, exponent: float):
        out_data = self.data**exponent

        def bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor(out_data, (self,), bw)

    def __truediv__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self * other**-1.0

    def __matmul__(self, other):
        def bw(g):
            self._accumulate(_unbroadcast(g @ np.swapaxes(other.data, -1, -2), self.data.shape))
            other._accumulate(_unbroadcast(np.swapaxes(self.data, -1, -2) @ g, other.data.shape))

        return Tensor(self.data @ other.data, (self, other), bw)

    # -- shape ops ------------------------------------------------------

    def reshape(self, *shape):
        orig = self.data.shape

        def bw(g):
            self._accumulate(g.reshape(orig))

        return Tensor(self.data.reshape(*shape), (self,), bw)

    def transpose(self, *axes):
        inverse = np.argsort(axes)

        def bw(g):
            self._accumulate(g.transpose(*inverse))

        return Tensor(self.data.transpose(*axes), (self,), bw)

    def sum(self, axis=None, keepdims=False):
        def bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(gg, self.data.shape).copy())

        return Tensor(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def bw(g):
        x._accumulate(g * sig * (1.0 + x.data * (1.0 - sig)))

    return Tensor(out_data, (x,), bw)


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis (shift-invariant, so the max is detached)."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accumulate(s * (g - dot))

    return Tensor(s, (x,), bw)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t._accumulate(g[tuple(idx)])

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    if rate <= 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate) / (1.0 - rate)

    def bw(g):
        x._accumulate(g * mask)

    return Tensor(x.data * mask, (x,), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsample of (B, C, H, W)."""
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        b, c, h2, w2 = g.shape
        self_grad = g.reshape(b, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
        x._accumulate(self_grad)

    return Tensor(out_data, (x,), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c, _, _ = xp.shape
    sb, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(b, c, kh, kw, oh, ow),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
    )
    return view.reshape(b, c * kh * kw, oh * ow)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 1) -> Tensor:
    """2-D convolution of (B, C, H, W) with (O, C, kh, kw) weights."""
    batch, cin, h, win = x.data.shape
    cout, _, kh, kw = w.data.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (win + 2 * pad - kw) // stride + 1
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_data = (wmat @ cols).reshape(batch, cout, oh, ow) + b.data[None, :, None, None]

    def bw(g):
        gflat = g.reshape(batch, cout, oh * ow)
        b._accumulate(g.sum(axis=(0, 2, 3)))
        gw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
        w._accumulate(gw.reshape(w.data.shape))
        gcols = np.matmul(wmat.T, gflat)
        gcols = gcols.reshape(batch, cin, kh, kw, oh, ow)
        gx_pad = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gx_pad[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[
                    :, :, i, j
                ]
        x._accumulate(gx_pad[:, :, pad : pad + h, pad : pad + win] if pad else gx_pad)

    return Tensor(out_data, (x, w, b), bw)
