from . import ops
from .gradcheck import check_gradients, finite_difference_grad
from .kernels import BACKEND as KERNEL_BACKEND
from .tensor import (
    Tensor,
    default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Tensor", "ops", "no_grad", "grad_enabled", "precision",
    "set_default_dtype", "default_dtype", "check_gradients",
    "finite_difference_grad", "KERNEL_BACKEND",
]
