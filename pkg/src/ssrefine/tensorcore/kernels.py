"""Patch-lowering kernels (im2col / col2im) with a compiled fast path.

The compiled extension is used when it imported cleanly; otherwise a numpy
implementation takes over. ``SSREFINE_KERNELS=numpy|compiled`` forces a
backend (forcing ``compiled`` when the extension is absent is an error).
Both backends accumulate col2im contributions in the same (ki, kj) order per
output element, so results agree bitwise.

Column layout: row index runs over (batch, out_row, out_col), column index
over (channel, ker_row, ker_col), both C-order.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import ConfigError, ShapeError

try:
    from . import _kernels_cy as _cy
except ImportError:
    _cy = None

_forced = os.environ.get("SSREFINE_KERNELS", "").strip().lower()
if _forced == "numpy":
    _cy = None
elif _forced == "compiled" and _cy is None:
    raise ConfigError("SSREFINE_KERNELS", "compiled kernels requested but the extension is not built")
elif _forced not in ("", "numpy", "compiled"):
    raise ConfigError("SSREFINE_KERNELS", f"unknown backend {_forced!r}")

BACKEND = "compiled" if _cy is not None else "numpy"


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - k) // stride + 1
    return out


def _check_geometry(shape, kh, kw, stride, pad):
    b, c, h, w = shape
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ShapeError("im2col", shape, (kh, kw), detail=f"bad stride/pad {stride}/{pad}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError("im2col", shape, (kh, kw), detail="kernel larger than padded input")
    return conv_out_size(h, kh, stride, pad), conv_out_size(w, kw, stride, pad)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B*oh*ow, C*kh*kw) patch matrix."""
    if x.ndim != 4:
        raise ShapeError("im2col", x.shape, detail="expected 4-d input")
    b, c, h, w = x.shape
    oh, ow = _check_geometry(x.shape, kh, kw, stride, pad)
    x = np.ascontiguousarray(x)
    if _cy is not None:
        out = np.empty((b * oh * ow, c * kh * kw), dtype=x.dtype)
        _cy.im2col(x, kh, kw, stride, pad, out)
        return out
    return _im2col_np(x, kh, kw, stride, pad, oh, ow)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of im2col: scatter-add patches back to (B,C,H,W)."""
    b, c, h, w = x_shape
    oh, ow = _check_geometry(x_shape, kh, kw, stride, pad)
    if cols.shape != (b * oh * ow, c * kh * kw):
        raise ShapeError("col2im", cols.shape, (b * oh * ow, c * kh * kw))
    cols = np.ascontiguousarray(cols)
    if _cy is not None:
        out = np.zeros((b, c, h, w), dtype=cols.dtype)
        _cy.col2im(cols, kh, kw, stride, pad, out)
        return out
    return _col2im_np(cols, x_shape, kh, kw, stride, pad, oh, ow)


def _im2col_np(x, kh, kw, stride, pad, oh, ow):
    b, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * kh * kw)


def _col2im_np(cols, x_shape, kh, kw, stride, pad, oh, ow):
    b, c, h, w = x_shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    win = cols.reshape(b, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += win[
                :, :, ki, kj
            ]
    if pad:
        out = np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])
    return out
