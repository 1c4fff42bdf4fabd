"""Public dense linear algebra and the finite-difference gradient oracle."""

from __future__ import annotations

import math
from array import array
from typing import Sequence

from .backend import kern
from .types import Matrix, NumericsError, Vector


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with deterministic (ascending-k) accumulation."""
    if a.cols != b.rows:
        raise NumericsError(
            f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    out = Matrix(a.rows, b.cols)
    kern.mm(a.data, b.data, out.data, a.rows, a.cols, b.cols)
    return out


def matvec(a: Matrix, v: Vector) -> Vector:
    if a.cols != v.dim:
        raise NumericsError(
            f"matvec shape mismatch: {a.rows}x{a.cols} @ vector[{v.dim}]")
    out = Vector(a.rows)
    kern.mm(a.data, v.data, out.data, a.rows, a.cols, 1)
    return out


def transpose(a: Matrix) -> Matrix:
    out = Matrix(a.cols, a.rows)
    kern.transpose(a.data, out.data, a.rows, a.cols)
    return out


def dot(a: Vector, b: Vector) -> float:
    if a.dim != b.dim:
        raise NumericsError(f"dot dimension mismatch: {a.dim} vs {b.dim}")
    return kern.dot(a.data, b.data, a.dim)


def inverse(a: Matrix) -> Matrix:
    """Dense inverse (Gauss-Jordan, partial pivoting)."""
    if a.rows != a.cols:
        raise NumericsError(f"inverse of non-square {a.rows}x{a.cols}")
    out = Matrix(a.rows, a.rows)
    if kern.mat_inverse(a.data, out.data, a.rows):
        raise NumericsError(f"singular matrix ({a.rows}x{a.rows})")
    return out


def softmax(scores: Vector, mask: Sequence[bool] | None = None) -> Vector:
    """Stable masked softmax; masked entries get exactly 0.

    Raises if every entry is masked (a degenerate attention row).
    """
    n = scores.dim
    mbuf = bytearray(b"\x01" * n) if mask is None else bytearray(
        1 if m else 0 for m in mask)
    if len(mbuf) != n:
        raise NumericsError(f"mask length {len(mbuf)} != scores dim {n}")
    out = Vector(n)
    bad = kern.masked_softmax(scores.data, mbuf, out.data, 1, n)
    if bad >= 0:
        raise NumericsError("softmax over a fully-masked score vector")
    return out


def finite_diff_grad(f, x, h: float = 1e-5):
    """Central-difference gradient oracle: (f(x+he_i) - f(x-he_i)) / 2h.

    x may be a Vector or a Matrix; the result has the same shape. f is
    called with x itself (perturbed in place, then restored).
    """
    g = Vector(x.dim) if isinstance(x, Vector) else Matrix(x.rows, x.cols)
    for i in range(len(x.data)):
        orig = x.data[i]
        x.data[i] = orig + h
        up = f(x)
        x.data[i] = orig - h
        dn = f(x)
        x.data[i] = orig
        if not (math.isfinite(up) and math.isfinite(dn)):
            raise NumericsError(
                f"non-finite evaluation in finite_diff_grad at coordinate {i}")
        g.data[i] = (up - dn) / (2.0 * h)
    return g


def frobenius_norm(a: Matrix) -> float:
    return math.sqrt(kern.sq_norm(a.data, len(a.data)))


def max_abs(a: Matrix) -> float:
    return max(map(abs, a.data), default=0.0)


def add_mats(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise NumericsError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Matrix(a.rows, a.cols)
    kern.add(a.data, b.data, out.data, len(a.data))
    return out


def sub_mats(a: Matrix, b: Matrix) -> Matrix:
    if a.shape != b.shape:
        raise NumericsError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Matrix(a.rows, a.cols)
    kern.sub(a.data, b.data, out.data, len(a.data))
    return out


def scale_mat(a: Matrix, alpha: float) -> Matrix:
    out = Matrix(a.rows, a.cols)
    kern.scal(a.data, alpha, out.data, len(a.data))
    return out


def rotate_vector(v: Vector, angles: Sequence[float]) -> Vector:
    """Apply block-diagonal 2x2 rotations to adjacent coordinate pairs."""
    if v.dim % 2:
        raise NumericsError(f"rotation needs even dim, got {v.dim}")
    if 2 * len(angles) != v.dim:
        raise NumericsError(
            f"need {v.dim // 2} angles for dim {v.dim}, got {len(angles)}")
    ang = angles if isinstance(angles, array) else array("d", angles)
    out = Vector(v.dim)
    kern.rotate_rows(v.data, ang, out.data, 1, v.dim, 0)
    return out
