"""Reverse-mode automatic differentiation over numpy arrays.

Tensors wrap float arrays and record the operations that produced them;
backward() walks the recorded graph in reverse topological order and
accumulates exact gradients.  Activations follow the (channels, X, Y, Z,
batch) layout throughout the network code.  float32 is the working
precision; float64 graphs are supported for finite-difference checking.

Convolution is evaluated as a sum of shifted channel-mixing matrix products
(one per kernel offset) so the heavy lifting stays inside BLAS.
"""
from __future__ import annotations

import numpy as np

from .volume import ShapeMismatch


class GraphNotRecorded(Exception):
    pass


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _as_array(data, like: np.ndarray | None = None) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if like is not None and like.dtype == np.float64 else np.float32)
    return arr


class Tensor:
    """Array node of the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        """Accumulate gradients of self into every reachable parameter."""
        if not self.requires_grad:
            raise GraphNotRecorded("tensor has no recorded graph (was grad recording enabled?)")
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)

        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes that broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    data = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

    def backward(g):
        return (g * mask,)

    return _make(data, (a,), backward)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    data = np.concatenate([a.data, b.data], axis=axis)
    split = a.data.shape[axis]

    def backward(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _make(data, (a, b), backward)


def take_channel(a: Tensor, c: int, axis: int = 0) -> Tensor:
    """Select one index along an axis (the slice keeps the remaining axes)."""
    idx = (slice(None),) * axis + (c,)
    data = a.data[idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _make(data, (a,), backward)


# largest gathered-tap buffer (elements) before conv3d falls back to z slabs
_CONV_BUFFER_CAP = 2**26


def _conv_z_slabs(Z: int, per_slice: int) -> list[tuple[int, int]]:
    zb = max(1, min(Z, _CONV_BUFFER_CAP // max(per_slice, 1)))
    return [(z0, min(z0 + zb, Z)) for z0 in range(0, Z, zb)]


def _gather_taps(xp: np.ndarray, k: int, X: int, Y: int, z0: int, z1: int) -> np.ndarray:
    """Stack the k^3 shifted views of the padded input into one matrix of
    shape (k^3 * Cin, X*Y*(z1-z0)*N), tap-major to match the reshaped kernel."""
    cin, n = xp.shape[0], xp.shape[4]
    zb = z1 - z0
    cols = X * Y * zb * n
    out = np.empty((k * k * k * cin, cols), dtype=xp.dtype)
    t = 0
    for i in range(k):
        for j in range(k):
            for l in range(k):
                sl = xp[:, i : i + X, j : j + Y, l + z0 : l + z0 + zb, :]
                out[t * cin : (t + 1) * cin] = sl.reshape(cin, cols)
                t += 1
    return out


def conv3d(x: Tensor, w: Tensor, padding: int | None = None) -> Tensor:
    """3D convolution, stride 1, odd kernels; output dims are X + 2p - k + 1.

    x: (Cin, X, Y, Z, N); w: (Cout, Cin, k, k, k).  The k^3 shifted views
    are gathered into one matrix so each slab is a single GEMM; slabs along
    z keep the gather buffer under _CONV_BUFFER_CAP elements.
    """
    cin, X, Y, Z, N = x.data.shape
    cout, cin_w, k = w.data.shape[0], w.data.shape[1], w.data.shape[2]
    if cin_w != cin:
        raise ShapeMismatch(f"input channels {cin} do not match kernel {cin_w}")
    if padding is None:
        padding = (k - 1) // 2
    p = padding
    xo, yo, zo = X + 2 * p - k + 1, Y + 2 * p - k + 1, Z + 2 * p - k + 1
    if min(xo, yo, zo) < 1:
        raise ShapeMismatch(f"kernel {k} with padding {p} exceeds input {(X, Y, Z)}")

    if k == 1 and p == 0:
        # pointwise conv: a single GEMM on a reshaped view, no gather
        w1 = w.data.reshape(cout, cin)
        xs1 = x.data.reshape(cin, X * Y * Z * N)
        data = (w1 @ xs1).reshape(cout, X, Y, Z, N)

        def backward_pointwise(g):
            g2 = g.reshape(cout, X * Y * Z * N)
            gw = (g2 @ xs1.T).reshape(w.data.shape)
            gx = (w1.T @ g2).reshape(cin, X, Y, Z, N)
            return gx, gw

        return _make(data, (x, w), backward_pointwise)

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    # w2 columns are tap-major blocks of cin, matching _gather_taps row order
    w2 = w.data.transpose(0, 2, 3, 4, 1).reshape(cout, k * k * k * cin)
    slabs = _conv_z_slabs(zo, k * k * k * cin * xo * yo * N)
    data = np.empty((cout, xo, yo, zo, N), dtype=x.data.dtype)
    for z0, z1 in slabs:
        xs = _gather_taps(xp, k, xo, yo, z0, z1)
        data[:, :, :, z0:z1, :] = (w2 @ xs).reshape(cout, xo, yo, z1 - z0, N)

    def backward(g):
        gw2 = np.zeros_like(w2)
        gxp = np.zeros_like(xp)
        for z0, z1 in slabs:
            zb = z1 - z0
            xs = _gather_taps(xp, k, xo, yo, z0, z1)
            g2 = g[:, :, :, z0:z1, :].reshape(cout, xo * yo * zb * N)
            gw2 += g2 @ xs.T
            gxs = w2.T @ g2
            t = 0
            for i in range(k):
                for j in range(k):
                    for l in range(k):
                        gxp[:, i : i + xo, j : j + yo, l + z0 : l + z0 + zb, :] += gxs[
                            t * cin : (t + 1) * cin
                        ].reshape(cin, xo, yo, zb, N)
                        t += 1
        gw = gw2.reshape(cout, k, k, k, cin).transpose(0, 4, 1, 2, 3)
        gx = gxp[:, p : p + X, p : p + Y, p : p + Z, :] if p else gxp
        return gx, gw

    return _make(data, (x, w), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2x2 max pooling with stride 2; ties route the gradient to the
    first maximal element of the window."""
    c, X, Y, Z, n = x.data.shape
    if X % 2 or Y % 2 or Z % 2:
        raise ShapeMismatch(f"maxpool needs even spatial dims, got {(X, Y, Z)}")
    win = x.data.reshape(c, X // 2, 2, Y // 2, 2, Z // 2, 2, n)
    win = win.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(c, X // 2, Y // 2, Z // 2, n, 8)
    idx = win.argmax(axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gwin = gwin.reshape(c, X // 2, Y // 2, Z // 2, n, 2, 2, 2)
        gwin = gwin.transpose(0, 1, 5, 2, 6, 3, 7, 4)
        return (gwin.reshape(c, X, Y, Z, n).copy(),)

    return _make(data, (x,), backward)


def _linear_indices(n_in: int, dtype) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Source indices and fractions for doubling one axis, half-pixel centers."""
    src = (np.arange(2 * n_in, dtype=dtype) + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    frac = (src - i0f).astype(dtype)
    i0 = np.clip(i0f.astype(np.int64), 0, n_in - 1)
    i1 = np.clip(i0f.astype(np.int64) + 1, 0, n_in - 1)
    return i0, i1, frac


def _upsample_axis(data: np.ndarray, axis: int) -> np.ndarray:
    i0, i1, f = _linear_indices(data.shape[axis], data.dtype)
    moved = np.moveaxis(data, axis, 0)
    shape = (-1,) + (1,) * (moved.ndim - 1)
    out = moved[i0] * (1.0 - f).reshape(shape) + moved[i1] * f.reshape(shape)
    return np.moveaxis(out, 0, axis)


def _downsample_axis_grad(g: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    i0, i1, f = _linear_indices(n_in, g.dtype)
    moved = np.moveaxis(g, axis, 0)
    shape = (-1,) + (1,) * (moved.ndim - 1)
    acc = np.zeros((n_in,) + moved.shape[1:], dtype=g.dtype)
    np.add.at(acc, i0, moved * (1.0 - f).reshape(shape))
    np.add.at(acc, i1, moved * f.reshape(shape))
    return np.moveaxis(acc, 0, axis)


def upsample2(x: Tensor) -> Tensor:
    """Trilinear upsampling by 2 in X, Y, Z (half-pixel-centered sampling),
    evaluated as three separable 1D linear interpolations."""
    data = x.data
    for axis in (1, 2, 3):
        data = _upsample_axis(data, axis)

    def backward(g):
        for axis in (3, 2, 1):
            g = _downsample_axis_grad(g, axis, x.data.shape[axis])
        return (g,)

    return _make(data, (x,), backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Per-voxel softmax over the channel axis (axis 0)."""
    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=0, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (logits,), backward)
