"""Central finite-difference oracle for backward rules."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def finite_difference_grad(fn, t: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d t by central differences, one element at a time.

    ``fn`` must rebuild its graph from ``t.data`` on every call.
    """
    base = t.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = fn().item()
        flat[i] = saved - eps
        lo = fn().item()
        flat[i] = saved
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def check_gradients(fn, tensors, eps: float = 1e-5, rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Compare backward() gradients of the scalar fn() against finite differences.

    Returns the worst relative error; raises AssertionError past tolerance.
    """
    for t in tensors:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad) for t in tensors]
    worst = 0.0
    for t, an in zip(tensors, analytic):
        fd = finite_difference_grad(fn, t, eps=eps)
        denom = np.maximum(np.abs(fd), np.abs(an))
        err = np.abs(an - fd)
        rel = err / np.where(denom > 0, denom, 1.0)
        bad = err > atol + rtol * denom
        if np.any(bad):
            i = np.unravel_index(int(np.argmax(err - (atol + rtol * denom))), an.shape)
            raise AssertionError(
                f"gradient mismatch at {i}: analytic={an[i]!r} fd={fd[i]!r} "
                f"(shape {t.shape}, max rel err {rel.max():.3e})"
            )
        if rel.size:
            worst = max(worst, float(rel[err > atol].max()) if np.any(err > atol) else worst)
    return worst
