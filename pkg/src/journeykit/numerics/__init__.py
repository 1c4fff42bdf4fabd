"""Self-contained dense linear algebra with a swappable kernel backend.

Matrices are flat float64 buffers; the same kernel contract is implemented
in pure Python and (when built) in a compiled extension, with identical
accumulation order so results match bit for bit. `autodiff` layers a
reverse-mode tape on top for gradient computation.
"""

from . import autodiff
from .backend import active_backend, compiled_available, kern, set_backend
from .ops import (
    add_mats,
    dot,
    finite_diff_grad,
    frobenius_norm,
    inverse,
    matmul,
    matvec,
    max_abs,
    rotate_vector,
    scale_mat,
    softmax,
    sub_mats,
    transpose,
)
from .types import Matrix, NumericsError, Vector

__all__ = [
    "Matrix",
    "Vector",
    "NumericsError",
    "matmul",
    "matvec",
    "transpose",
    "dot",
    "inverse",
    "softmax",
    "finite_diff_grad",
    "frobenius_norm",
    "max_abs",
    "add_mats",
    "sub_mats",
    "scale_mat",
    "rotate_vector",
    "autodiff",
    "kern",
    "active_backend",
    "set_backend",
    "compiled_available",
]
