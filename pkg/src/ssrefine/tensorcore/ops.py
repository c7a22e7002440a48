"""Differentiable operations over :class:`Tensor`.

Each op validates shapes/domains eagerly, computes the forward value with
numpy, and (when grad is enabled and some input requires it) attaches a
closure implementing the vector-Jacobian product. Gradient accumulation is
``t.grad = t.grad + g`` — never in place — so buffers may alias safely.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..errors import ContractError, DomainError, ShapeError
from . import kernels
from .tensor import Tensor, default_dtype, grad_enabled

__all__ = [
    "constant", "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt",
    "tanh", "sigmoid", "relu", "leaky_relu", "softplus", "matmul", "softmax",
    "sum", "mean", "l2_normalize", "concat", "reshape", "transpose", "take",
    "getitem", "im2col", "col2im", "conv2d", "conv2d_transpose",
    "cholesky_solve",
]


def constant(value, dtype=None) -> Tensor:
    """Wrap a value as a graph constant."""
    return Tensor(value, requires_grad=False, dtype=dtype)


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else default_dtype()
    return Tensor(x, dtype=dtype)


def _check_dtypes(op: str, *ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise ContractError(f"{op}: mixed dtypes {sorted(str(d) for d in dts)}")


def _node(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    need = [p for p in parents if p.requires_grad]
    if grad_enabled() and need:
        out.requires_grad = True
        out._parents = tuple(need)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _acc(t: Tensor, g) -> None:
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce g (gradient of a broadcast result) back to `shape`."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic --------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_dtypes("add", a, b)
    data = a.data + b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        if na:
            _acc(a, _unbroadcast(g, a.data.shape))
        if nb:
            _acc(b, _unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_dtypes("sub", a, b)
    data = a.data - b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        if na:
            _acc(a, _unbroadcast(g, a.data.shape))
        if nb:
            _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_dtypes("mul", a, b)
    data = a.data * b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        if na:
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
        if nb:
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _check_dtypes("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    data = a.data / b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        if na:
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
        if nb:
            _acc(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return _node(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _coerce(a)
    data = -a.data

    def backward(g):
        _acc(a, -g)

    return _node(data, (a,), backward)


# -- elementwise nonlinearities ----------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        _acc(a, g * data)

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive operand")
    data = np.log(a.data)

    def backward(g):
        _acc(a, g / a.data)

    return _node(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative operand")
    data = np.sqrt(a.data)

    def backward(g):
        _acc(a, g * (0.5 / data))

    return _node(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - data * data))

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backward(g):
        _acc(a, g * data * (1.0 - data))

    return _node(data, (a,), backward)


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

    def backward(g):
        _acc(a, g * mask)

    return _node(data, (a,), backward)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    data = np.where(mask, a.data, a.data * a.data.dtype.type(slope))

    def backward(g):
        _acc(a, g * np.where(mask, a.data.dtype.type(1.0), a.data.dtype.type(slope)))

    return _node(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), computed stably; gradient is sigmoid(x)."""
    data = np.maximum(a.data, 0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward(g):
        _acc(a, g * _sigmoid_np(a.data))

    return _node(data, (a,), backward)


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_dtypes("matmul", a, b)
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError("matmul", a.shape, b.shape)
    else:
        raise ShapeError("matmul", a.shape, b.shape, detail="need both 2-d or both 3-d")
    data = a.data @ b.data
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        if na:
            _acc(a, g @ b.data.swapaxes(-1, -2))
        if nb:
            _acc(b, a.data.swapaxes(-1, -2) @ g)

    return _node(data, (a, b), backward)


def cholesky_solve(a: Tensor, b: Tensor) -> Tensor:
    """Solve A x = b for symmetric positive-definite A (reads the lower triangle).

    Gradient w.r.t. A is the free-matrix form -(A^-1 g) x^T.
    """
    a, b = _coerce(a), _coerce(b)
    _check_dtypes("cholesky_solve", a, b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("cholesky_solve", a.shape, b.shape, detail="A must be square")
    if b.ndim not in (1, 2) or b.shape[0] != a.shape[0]:
        raise ShapeError("cholesky_solve", a.shape, b.shape)
    try:
        factor = cho_factor(a.data, lower=True)
    except np.linalg.LinAlgError as e:
        raise DomainError(f"cholesky_solve: matrix not positive definite ({e})") from e
    data = cho_solve(factor, b.data)
    na, nb = a.requires_grad, b.requires_grad

    def backward(g):
        gb = cho_solve(factor, g)
        if nb:
            _acc(b, gb)
        if na:
            if data.ndim == 1:
                _acc(a, -np.outer(gb, data))
            else:
                _acc(a, -(gb @ data.T))

    return _node(data, (a, b), backward)


# -- shape manipulation ---------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _coerce(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError("reshape", a.shape, detail=f"target {shape}: {e}") from None

    def backward(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        _acc(a, g.transpose(inv))

    return _node(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: empty input list")
    _check_dtypes("concat", *tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", *[t.shape for t in tensors], detail=str(e)) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    needs = [t.requires_grad for t in tensors]

    def backward(g):
        index = [slice(None)] * g.ndim
        for t, need, lo, hi in zip(tensors, needs, offsets[:-1], offsets[1:]):
            if need:
                index[axis] = slice(lo, hi)
                _acc(t, g[tuple(index)])

    return _node(data, tuple(tensors), backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices only); use :func:`take` for index arrays."""
    a = _coerce(a)
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if not isinstance(p, (int, np.integer, slice)) and p is not Ellipsis:
            raise ContractError("getitem supports ints/slices; use take() for index arrays")
    data = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        buf[key] += g
        _acc(a, buf)

    return _node(data, (a,), backward)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Gather `indices` along `axis`; scatter-adds on the way back."""
    a = _coerce(a)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take: indices must be integers")
    n = a.data.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis {axis} with size {n}")
    data = np.take(a.data, idx, axis=axis)
    sel = tuple(idx if i == axis % a.ndim else slice(None) for i in range(a.ndim))

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, sel, g)
        _acc(a, buf)

    return _node(data, (a,), backward)


# -- reductions -----------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (int(axis),)
    return tuple(int(ax) % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(g, a.data.shape))

    return _node(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    data = a.data.mean(axis=axes, keepdims=keepdims)
    inv = a.data.dtype.type(1.0 / count)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(g * inv, a.data.shape))

    return _node(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, (g - inner) * data)

    return _node(data, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-normalize along `axis`; all-zero slices map to zero with zero grad."""
    a = _coerce(a)
    sq = (a.data * a.data).sum(axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0).astype(a.data.dtype, copy=False)
    data = a.data / safe
    live = norm > 0

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        _acc(a, np.where(live, (g - data * inner) / safe, 0.0).astype(a.data.dtype, copy=False))

    return _node(data, (a,), backward)


# -- convolution lowering ---------------------------------------------------------


def _kernel_pair(kernel):
    return (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)


def im2col(x: Tensor, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    x = _coerce(x)
    kh, kw = _kernel_pair(kernel)
    data = kernels.im2col(x.data, kh, kw, stride, padding)
    x_shape = x.data.shape

    def backward(g):
        _acc(x, kernels.col2im(g, x_shape, kh, kw, stride, padding))

    return _node(data, (x,), backward)


def col2im(cols: Tensor, x_shape, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    cols = _coerce(cols)
    kh, kw = _kernel_pair(kernel)
    data = kernels.col2im(cols.data, x_shape, kh, kw, stride, padding)

    def backward(g):
        _acc(cols, kernels.im2col(g, kh, kw, stride, padding))

    return _node(data, (cols,), backward)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution via patch lowering and one matmul."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d", x.shape, w.shape, detail="need NCHW input and OIHW weight")
    bs, c, h, ww_ = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d", x.shape, w.shape, detail="channel mismatch")
    oh = kernels.conv_out_size(h, kh, stride, padding)
    ow = kernels.conv_out_size(ww_, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="empty output")
    cols = im2col(x, (kh, kw), stride, padding)
    wmat = transpose(reshape(w, (o, c * kh * kw)))
    out = matmul(cols, wmat)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError("conv2d", b.shape, (o,), detail="bias")
        out = add(out, b)
    return transpose(reshape(out, (bs, oh, ow, o)), (0, 3, 1, 2))


def conv2d_transpose(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW transposed convolution (adjoint of conv2d) with IOHW weight."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d_transpose", x.shape, w.shape)
    bs, c, h, ww_ = x.shape
    ci, o, kh, kw = w.shape
    if ci != c:
        raise ShapeError("conv2d_transpose", x.shape, w.shape, detail="channel mismatch")
    oh = (h - 1) * stride - 2 * padding + kh
    ow = (ww_ - 1) * stride - 2 * padding + kw
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d_transpose", x.shape, w.shape, detail="empty output")
    xmat = reshape(transpose(x, (0, 2, 3, 1)), (bs * h * ww_, c))
    cols = matmul(xmat, reshape(w, (c, o * kh * kw)))
    out = col2im(cols, (bs, o, oh, ow), (kh, kw), stride, padding)
    if b is not None:
        if b.shape != (o,):
            raise ShapeError("conv2d_transpose", b.shape, (o,), detail="bias")
        out = add(out, reshape(b, (1, o, 1, 1)))
    return out


# -- operator wiring ---------------------------------------------------------------

Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = lambda self, other: sub(other, self)
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = lambda self, other: div(other, self)
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.reshape = reshape
Tensor.sum = sum
Tensor.mean = mean
