"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive builds a node holding its parents and a
closure that maps the output gradient to one gradient per parent.  Calling
:func:`backward` on a scalar walks the graph in reverse topological order
and returns a :class:`GradientTape` with the gradient of every leaf that
requires it.

Data lives in numpy arrays, row-major and channel-first.  New tensors use
float32 unless a :func:`precision` context selects float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DegenerateBatchError, NonFiniteError, ShapeError

_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = False


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    global _DTYPE
    previous = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph; results never require grad."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def set_check_finite(enabled: bool) -> None:
    """Eager NaN/Inf detection after every primitive (off by default)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


@contextlib.contextmanager
def check_finite(enabled: bool = True):
    global _CHECK_FINITE
    previous = _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)
    try:
        yield
    finally:
        _CHECK_FINITE = previous


class Tensor:
    """An n-dimensional array that can take part in an autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool = False, op: str = "leaf") -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._parents = ()
        out._backward = None
        out._op = op
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar; the functions below are the real primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor._wrap(np.asarray(data), needs, op)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), backward, "div")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    s = a.data.dtype.type(s)

    def backward(g):
        return (g * s,)

    return _result(a.data * s, (a,), backward, "scale")


def pow(a: Tensor, exponent: float) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), backward, "pow")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward, "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


def huber(a: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: 0.5*x**2 inside [-delta, delta], linear outside."""
    x = a.data
    ax = np.abs(x)
    inside = ax <= delta
    out = np.where(inside, 0.5 * x * x, delta * (ax - 0.5 * delta))

    def backward(g):
        return (g * np.where(inside, x, delta * np.sign(x)),)

    return _result(out.astype(x.dtype, copy=False), (a,), backward, "huber")


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(out, (a,), backward, "reshape")


def flatten_spatial(f: Tensor) -> Tensor:
    """[c, h, w] -> [c, h*w]; row i is channel i in row-major order."""
    if f.ndim != 3:
        raise ShapeError(f"flatten_spatial expects a rank-3 [c, h, w] tensor, got {f.shape}")
    return reshape(f, (f.shape[0], f.shape[1] * f.shape[2]))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; with no ``axes`` swap the last two."""
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs at least 2 axes")
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward, "transpose")


def getitem(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing."""

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _result(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------------------
# reductions and linear algebra


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(a.data.mean(axis=axes, keepdims=keepdims), (a,), backward, "mean")


def sq_frobenius(a: Tensor) -> Tensor:
    """Sum of squared entries."""
    flat = a.data.ravel()

    def backward(g):
        return (2.0 * g * a.data,)

    return _result(np.dot(flat, flat), (a,), backward, "sq_frobenius")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of the last two axes, broadcasting leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def gram(x: Tensor) -> Tensor:
    """``x @ x^T`` over the last two axes, exactly symmetric.

    The product is symmetrised so that entry (i, j) and (j, i) are bitwise
    equal regardless of how BLAS tiles the multiplication.
    """
    if x.ndim < 2:
        raise ShapeError(f"gram needs rank >= 2, got {x.shape}")
    raw = np.matmul(x.data, np.swapaxes(x.data, -1, -2))
    out = 0.5 * (raw + np.swapaxes(raw, -1, -2))

    def backward(g):
        return (np.matmul(g + np.swapaxes(g, -1, -2), x.data),)

    return _result(out, (x,), backward, "gram")


# ---------------------------------------------------------------------------
# softmax family


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward, "log_softmax")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets``.

    ``logits`` is [N, K] or [N, K, *spatial]; ``targets`` is [N] or
    [N, *spatial].  The mean runs over every sample (and pixel).
    """
    targets = np.asarray(targets)
    if logits.ndim < 2:
        raise ShapeError("cross_entropy needs logits of rank >= 2")
    expected = (logits.shape[0],) + logits.shape[2:]
    if targets.shape != expected:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    k = logits.shape[1]
    z = np.moveaxis(logits.data, 1, -1).reshape(-1, k)
    t = targets.reshape(-1).astype(np.intp)
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError("target class index out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    rows = np.arange(t.size)
    loss = -logp[rows, t].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, t] -= 1.0
        d *= g / t.size
        d = d.reshape(logits.shape[:1] + logits.shape[2:] + (k,))
        return (np.moveaxis(d, -1, 1),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# convolution, normalisation, pooling


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral conv output: size={size} kernel={kernel} stride={stride} padding={padding}"
        )
    return span // stride + 1


_CHANNEL_MAJOR_MAX_C = 8


def _conv2d_channel_major(x, weight, stride, padding, ho, wo):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, -1)
    wmat = weight.data.reshape(o, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        gt = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (gt @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ gt).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
            gx = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        return gx, gw

    return out, backward


def _conv2d_channels_last(x, weight, stride, padding, ho, wo):
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride, :]).reshape(-1, c)
    else:
        cols = np.empty((n, ho, wo, kh * kw * c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                k0 = (i * kw + j) * c
                cols[..., k0 : k0 + c] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]
        cols = cols.reshape(-1, kh * kw * c)
    # weight laid out as (kh, kw, C) per output channel to match the columns
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = np.ascontiguousarray((cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, kh * kw * c)
            gxp = np.zeros((n, hp, wp, c), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    k0 = (i * kw + j) * c
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[..., k0 : k0 + c]
            gx = np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2))
        return gx, np.ascontiguousarray(gw)

    return out, backward


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [N, C, H, W] input with [O, C, k, k] weights.

    Implemented as im2col + one matrix product.  Narrow inputs gather
    columns channel-major (copies run along image rows); wider inputs gather
    channels-last (copies run along the channel axis).
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {ci}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if c <= _CHANNEL_MAJOR_MAX_C:
        out, backward = _conv2d_channel_major(x, weight, stride, padding, ho, wo)
    else:
        out, backward = _conv2d_channels_last(x, weight, stride, padding, ho, wo)
    return _result(out, (x, weight), backward, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray | None = None,
    running_var: np.ndarray | None = None,
    training: bool = True,
    eps: float = 1e-5,
):
    """Per-channel normalisation of [N, C, H, W] input.

    In training mode the batch mean and (biased) variance over (N, H, W) are
    used and returned alongside the output so the caller can update its
    running statistics.  In eval mode ``running_mean``/``running_var`` are
    used and the returned statistics are ``None``.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine params must have shape ({c},)")
    axes = (0, 2, 3)
    bshape = (1, c, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if training:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if m < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs N*H*W >= 2, got {m}")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
        out = g_ * xhat + b_

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * g_
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return dx, dgamma, dbeta

        stats = (mu, var)
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("eval-mode batch_norm needs running statistics")
        inv_std = (1.0 / np.sqrt(running_var + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x.data - running_mean.astype(x.dtype).reshape(bshape)) * inv_std
        out = g_ * xhat + b_

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        stats = None
    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm"), stats


def _check_pool(x: Tensor, k: int):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects [N, C, H, W], got {x.shape}")
    if x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"pool size {k} does not divide spatial dims {x.shape[2:]}")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling."""
    _check_pool(x, k)
    n, c, h, w = x.shape
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k),)

    return _result(out, (x,), backward, "avg_pool2d")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties route the gradient to the first max
    in row-major window order."""
    _check_pool(x, k)
    views = [x.data[:, :, i::k, j::k] for i in range(k) for j in range(k)]
    out = views[0]
    for v in views[1:]:
        out = np.maximum(out, v)

    def backward(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for idx, v in enumerate(views):
            hit = (v == out) & ~taken
            taken |= hit
            i, j = divmod(idx, k)
            gx[:, :, i::k, j::k] = g * hit
        return (gx,)

    return _result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, H, W] -> [N, C] spatial mean."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects [N, C, H, W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest expects [N, C, H, W], got {x.shape}")
    factor = int(factor)
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest")


# ---------------------------------------------------------------------------
# backward pass


class GradientTape:
    """Gradients from one backward pass, keyed by parameter identity."""

    def __init__(self):
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _put(self, param: Tensor, grad: np.ndarray) -> None:
        self._entries[id(param)] = (param, grad)

    def __getitem__(self, param: Tensor) -> np.ndarray:
        return self._entries[id(param)][1]

    def get(self, param: Tensor, default=None):
        entry = self._entries.get(id(param))
        return default if entry is None else entry[1]

    def __contains__(self, param: Tensor) -> bool:
        return id(param) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self) -> Iterator[tuple[Tensor, np.ndarray]]:
        return iter(self._entries.values())

    def params(self) -> list[Tensor]:
        return [p for p, _ in self._entries.values()]


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> GradientTape:
    """Reverse-mode sweep from a scalar ``loss``.

    Leaf tensors with ``requires_grad`` receive their gradient both in the
    returned tape and in their ``.grad`` attribute (overwritten, not
    accumulated across calls).
    """
    if loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradientTape()
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g
            tape._put(node, g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ops that the gradient suite enumerates
DIFFERENTIABLE_OPS = (
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "pow",
    "matmul",
    "gram",
    "transpose",
    "reshape",
    "getitem",
    "concat",
    "sum",
    "mean",
    "relu",
    "exp",
    "log",
    "huber",
    "softmax",
    "log_softmax",
    "sq_frobenius",
    "conv2d",
    "batch_norm",
    "avg_pool2d",
    "max_pool2d",
    "global_avg_pool",
    "upsample_nearest",
    "cross_entropy",
)
