"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the primitives needed by the target convnet, the hypernetwork, the gauge
map and the entropy estimator are provided.  Every operation records its
parents and a backward closure on the output :class:`Tensor`; :func:`backward`
orders the recorded nodes topologically and walks them once in reverse.

Convolutions and max-pooling work on channel-last images and accept an
optional leading *model* axis, so a batch of independently weighted networks
can be evaluated in one call::

    x: (M, B, H, W, C_in)   kernel: (M, k, k, C_in, C_out)
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE = np.float32
_CHECK_FINITE = False


class ShapeError(ValueError):
    """Incompatible input shapes for a primitive."""

    def __init__(self, primitive: str, *shapes, detail: str = ""):
        shapes_txt = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shapes_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = shapes


class NumericError(FloatingPointError):
    """A primitive or a training step produced NaN or Inf."""


def get_dtype():
    return _DTYPE


def set_dtype(dtype) -> None:
    """Set the global float type (``np.float32`` default, ``np.float64`` for checks)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    """Raise :class:`NumericError` as soon as any primitive emits a non-finite value."""
    global _CHECK_FINITE
    old = _CHECK_FINITE
    _CHECK_FINITE = enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE and arr.dtype.kind in "fiub":
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"{op}: non-finite output")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g / (2.0 * out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    if not slope > 0:
        raise ValueError(f"leaky_relu: slope must be positive, got {slope}")
    a = as_tensor(a)
    mask = a.data > 0
    factor = np.where(mask, 1.0, slope).astype(a.data.dtype)
    return _make("leaky_relu", a.data * factor, (a,), lambda g: (g * factor,))


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero wherever the floor is active."""
    a = as_tensor(a)
    mask = a.data > floor
    out = np.where(mask, a.data, floor).astype(a.data.dtype)
    return _make("clamp_min", out, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _make("mean", np.asarray(out, dtype=a.data.dtype), (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), bw)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)

    def bw(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - out_k),)

    return _make("logsumexp", np.squeeze(out_k, axis=axis), (a,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, detail=f"target {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    """Slicing and integer-array indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    out = a.data[index]

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make("slice", np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in tensors)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", out, tensors, bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- convolution


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """(M, B, H, W, C) -> (M, B*H*W, k*k*C) patches for a SAME, stride-1 window."""
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # M,B,H,W,C,k,k
    m, b, h, w, c = x.shape
    return win.transpose(0, 1, 2, 3, 5, 6, 4).reshape(m, b * h * w, k * k * c)


def _conv_same(x: np.ndarray, kernel: np.ndarray):
    m, b, h, w, _ = x.shape
    k, cout = kernel.shape[1], kernel.shape[-1]
    cols = _im2col(x, k)
    out = np.matmul(cols, kernel.reshape(m, -1, cout))
    return out.reshape(m, b, h, w, cout), cols


def conv2d(x, kernel) -> Tensor:
    """Stride-1 SAME convolution (cross-correlation, zero padding), odd square kernels.

    ``x`` is (B, H, W, C_in) with kernel (k, k, C_in, C_out), or batched over
    models as (M, B, H, W, C_in) with kernel (M, k, k, C_in, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim == 4 and kernel.ndim == 4:
        out = conv2d(reshape(x, (1,) + x.shape), reshape(kernel, (1,) + kernel.shape))
        return reshape(out, out.shape[1:])
    if x.ndim != 5 or kernel.ndim != 5:
        raise ShapeError("conv2d", x.shape, kernel.shape, detail="expected (M,B,H,W,C) and (M,k,k,C,O)")
    m, _, _, _, cin = x.shape
    km, k, k2, kcin, cout = kernel.shape
    if km != m or k != k2 or kcin != cin or k % 2 == 0:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    out, cols = _conv_same(x.data, kernel.data)

    def bw(g):
        gk = None
        gx = None
        if kernel.requires_grad:
            g2 = g.reshape(m, -1, cout)
            gk = np.matmul(np.swapaxes(cols, 1, 2), g2).reshape(kernel.shape)
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-swapped kernel
            flipped = np.ascontiguousarray(kernel.data[:, ::-1, ::-1].transpose(0, 1, 2, 4, 3))
            gx, _ = _conv_same(g, flipped)
        return gx, gk

    return _make("conv2d", out, (x, kernel), bw)


def maxpool2d(x, size: int = 2) -> Tensor:
    """size x size max-pool, stride = size, SAME padding (pads never win).

    Output spatial dims are ``ceil(H / size)``.  On ties the gradient goes to
    the first maximal element in row-major window order.
    """
    x = as_tensor(x)
    if x.ndim == 4:
        out = maxpool2d(reshape(x, (1,) + x.shape), size)
        return reshape(out, out.shape[1:])
    if x.ndim != 5:
        raise ShapeError("maxpool2d", x.shape, detail="expected (M,B,H,W,C)")
    m, b, h, w, c = x.shape
    ho, wo = -(-h // size), -(-w // size)
    data = x.data
    if ho * size != h or wo * size != w:
        data = np.pad(data, ((0, 0), (0, 0), (0, ho * size - h), (0, wo * size - w), (0, 0)),
                      constant_values=-np.inf)
    offsets = [(dy, dx) for dy in range(size) for dx in range(size)]
    views = [data[:, :, dy::size, dx::size, :] for dy, dx in offsets]
    out = views[0].copy()
    for v in views[1:]:
        np.maximum(out, v, out=out)
    # index of the first maximal element in each window
    idx = np.full(out.shape, len(views) - 1, dtype=np.uint8)
    for k in range(len(views) - 2, -1, -1):
        idx[views[k] == out] = k

    def bw(g):
        gfull = np.zeros(data.shape, dtype=g.dtype)
        for k, (dy, dx) in enumerate(offsets):
            gfull[:, :, dy::size, dx::size, :] = np.where(idx == k, g, 0)
        return (np.ascontiguousarray(gfull[:, :, :h, :w, :]),)

    return _make("maxpool2d", out, (x,), bw)


# ---------------------------------------------------------------- batch norm

BN_EPS = 1e-5


@dataclass
class RunningStats:
    """Exponential moving averages of batch statistics, empty until first update."""

    momentum: float = 0.99
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None

    @property
    def populated(self) -> bool:
        return self.mean is not None

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        if self.mean is None:
            self.mean = batch_mean.copy()
            self.var = batch_var.copy()
        else:
            d = self.momentum
            self.mean = (d * self.mean + (1 - d) * batch_mean).astype(batch_mean.dtype)
            self.var = (d * self.var + (1 - d) * batch_var).astype(batch_var.dtype)


def batchnorm(x, scale, shift, mode: str = "train", state: Optional[RunningStats] = None,
              eps: float = BN_EPS, update_stats: bool = True) -> Tensor:
    """Batch normalization over axis 0 of a (N, F) input.

    In ``train`` mode the batch mean and (biased) variance normalize ``x`` and
    ``state`` is updated by EMA with the unbiased variance; ``infer`` mode uses
    the stored running statistics.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    if x.ndim != 2 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("batchnorm", x.shape, scale.shape, shift.shape)
    n = x.shape[0]
    if mode == "train":
        if n < 2:
            raise ValueError("batchnorm: train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if state is not None and update_stats:
            state.update(mu, var * (n / (n - 1)))
    elif mode == "infer":
        if state is None or not state.populated:
            raise ValueError("batchnorm: infer mode needs populated running statistics")
        mu, var = state.mean.astype(x.data.dtype), state.var.astype(x.data.dtype)
    else:
        raise ValueError(f"batchnorm: unknown mode {mode!r}")

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * scale.data + shift.data

    def bw(g):
        gscale = (g * xhat).sum(axis=0) if scale.requires_grad else None
        gshift = g.sum(axis=0) if shift.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data
            if mode == "train":
                gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
            else:
                gx = gxhat * inv
        return gx, gscale, gshift

    return _make("batchnorm", out.astype(x.data.dtype), (x, scale, shift), bw)


# ---------------------------------------------------------------- backward


@dataclass
class Graph:
    """Topologically ordered nodes reachable from a root tensor."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Graph":
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradients of the scalar ``loss`` with respect to each tensor in ``params``.

    Parameters without a path to the loss get a zero gradient.
    """
    params = list(params)
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    grads = {id(loss): np.ones_like(loss.data)}
    wanted = {id(p) for p in params}
    kept = {}
    if loss.requires_grad:
        for node in reversed(Graph.from_root(loss).nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                kept[id(node)] = g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
    return [kept.get(id(p), np.zeros_like(p.data)) for p in params]


def grad_check(fn: Callable[[Sequence[Tensor]], Tensor], params: Sequence[np.ndarray],
               step: float = 1e-5, samples: int = 50, rng=None, floor: float = 1e-10) -> dict:
    """Compare analytic gradients with central finite differences.

    ``fn`` maps leaf tensors (one per array in ``params``) to a scalar loss.
    ``samples`` random coordinates are drawn per parameter group.  Returns
    ``{group index: worst relative error}`` plus the overall ``"max"``; the
    relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if _DTYPE is not np.float64:
        raise RuntimeError("grad_check requires 64-bit precision mode")
    rng = np.random.default_rng(rng)
    arrays = [np.array(p, dtype=np.float64) for p in params]

    def evaluate():
        return float(fn([Tensor(a) for a in arrays]).data)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = backward(fn(leaves), leaves)
    report = {}
    for gi, arr in enumerate(arrays):
        flat = arr.reshape(-1)
        n = min(samples, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = evaluate()
            flat[c] = orig - step
            down = evaluate()
            flat[c] = orig
            num = (up - down) / (2 * step)
            a = analytic[gi].reshape(-1)[c]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
        report[gi] = worst
    report["max"] = max(report.values()) if report else 0.0
    return report
