"""A small dense-array autodiff engine (reverse mode) over numpy.

Each ``Tensor`` records its parents and a closure that pushes its gradient back to
them. ``backward`` runs the closures in reverse topological order. Only the ops the
audiovisual network and its losses need are provided.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, _parents=(), name: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accum(self, g):
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad=None):
        order, seen = [], set()

        def visit(node):
            if id(node) in seen:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            order.append(node)

        visit(self)
        self._accum(np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # intermediate gradients are not needed once propagated
        for node in order:
            if node._parents:
                node.grad = None

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward) -> Tensor:
    req = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, _parents=tuple(parents) if req else ())
    if req:
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)

    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: a._accum(-g))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)

    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    return _result(a.data * a.data, (a,), lambda g: a._accum(2.0 * a.data * g))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product."""

    def bw(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


_relu_masks: list | None = None


@contextmanager
def record_relu_masks():
    """Collect the on/off mask of every ReLU evaluated inside the block, in call order."""
    global _relu_masks
    prev, _relu_masks = _relu_masks, []
    try:
        yield _relu_masks
    finally:
        _relu_masks = prev


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _relu_masks is not None:
        _relu_masks.append(mask)
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: a._accum(g * mask))


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: a._accum(g.reshape(a.shape)))


def total(a: Tensor) -> Tensor:
    return _result(a.data.sum(), (a,), lambda g: a._accum(np.broadcast_to(g, a.shape)))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _result(a.data.mean(), (a,), lambda g: a._accum(np.broadcast_to(g / n, a.shape)))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            t._accum(part)

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(a: Tensor, indices, axis: int = -1) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % a.data.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (slice(None),) * ax + (idx,), g)
        a._accum(full)

    return _result(np.take(a.data, idx, axis=ax), (a,), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map ``x @ w + b`` for a batch of row vectors."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def batched_matvec(M, x: Tensor) -> Tensor:
    """``y[n] = M[n] @ x[n]`` with ``M`` (N, A, K) a constant and ``x`` (N, K)."""
    M = np.asarray(M, dtype=x.dtype)
    return _result(np.einsum("nak,nk->na", M, x.data), (x,),
                   lambda g: x._accum(np.einsum("nak,na->nk", M, g)))


def pinhole(p: Tensor, focal, principal_point) -> Tensor:
    """Project (..., 3) camera-space points to (..., 2) pixels; depth must be positive."""
    f = np.asarray(focal, dtype=p.dtype)
    c = np.asarray(principal_point, dtype=p.dtype)
    xy, z = p.data[..., :2], p.data[..., 2:3]

    def bw(g):
        gp = np.empty_like(p.data)
        gp[..., :2] = g * f / z
        gp[..., 2] = -np.sum(g * f * xy, axis=-1) / z[..., 0] ** 2
        p._accum(gp)

    return _result(f * xy / z + c, (p,), bw)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1)) -> Tensor:
    """Valid 2-D convolution (cross-correlation), NHWC input and (kh, kw, C, F) kernel."""
    squeeze = x.data.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    N, H, W, C = x.shape
    kh, kw, Ck, F = w.shape
    sh, sw = stride
    if kh > H or kw > W:
        raise ValueError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    if Ck != C:
        raise ValueError(f"kernel expects {Ck} channels, input has {C}")
    Ho, Wo = conv_output_size(H, kh, sh), conv_output_size(W, kw, sw)
    win = sliding_window_view(x.data, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(N * Ho * Wo, kh * kw * C)
    wmat = w.data.reshape(kh * kw * C, F)
    out = (cols @ wmat).reshape(N, Ho, Wo, F)

    def bw(g):
        g2 = g.reshape(-1, F)
        if w.requires_grad:
            w._accum((cols.T @ g2).reshape(w.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(N, Ho, Wo, kh, kw, C)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw, :] += dcols[:, :, :, i, j, :]
            x._accum(dx)

    y = _result(out, (x, w), bw)
    if b is not None:
        y = add(y, b)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def mse(pred: Tensor, target) -> Tensor:
    return mean(square(pred - as_tensor(target, pred.dtype)))
