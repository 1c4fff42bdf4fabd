"""Dense float64 matrix/vector containers used by every other module.

Data lives in flat row-major ``array('d')`` buffers so both kernel backends
(pure Python and the compiled extension) can operate on the same memory
without copies.
"""

from __future__ import annotations

import math
from array import array


class NumericsError(ValueError):
    """Shape mismatch or invalid numeric content."""


def _finite(buf) -> bool:
    return all(map(math.isfinite, buf))


class Matrix:
    """Row-major dense matrix of 64-bit floats."""

    __slots__ = ("rows", "cols", "data")

    def __init__(self, rows: int, cols: int, data=None):
        if rows < 0 or cols < 0:
            raise NumericsError(f"negative matrix shape {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        if data is None:
            self.data = array("d", bytes(8 * rows * cols))
        else:
            self.data = data if isinstance(data, array) else array("d", data)
            if len(self.data) != rows * cols:
                raise NumericsError(
                    f"matrix {rows}x{cols} needs {rows * cols} entries, "
                    f"got {len(self.data)}")

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(rows, cols)

    @classmethod
    def identity(cls, n: int) -> "Matrix":
        m = cls(n, n)
        for i in range(n):
            m.data[i * n + i] = 1.0
        return m

    @classmethod
    def from_rows(cls, rows) -> "Matrix":
        rows = [list(r) for r in rows]
        n = len(rows)
        c = len(rows[0]) if rows else 0
        if any(len(r) != c for r in rows):
            raise NumericsError("ragged rows")
        flat = array("d", (x for r in rows for x in r))
        return cls(n, c, flat)

    @property
    def shape(self):
        return (self.rows, self.cols)

    def at(self, i: int, j: int) -> float:
        return self.data[i * self.cols + j]

    def put(self, i: int, j: int, v: float) -> None:
        self.data[i * self.cols + j] = v

    def row(self, i: int) -> "Vector":
        c = self.cols
        return Vector(c, self.data[i * c:(i + 1) * c])

    def set_row(self, i: int, values) -> None:
        c = self.cols
        buf = values.data if isinstance(values, Vector) else array("d", values)
        if len(buf) != c:
            raise NumericsError(f"row length {len(buf)} != {c}")
        self.data[i * c:(i + 1) * c] = buf

    def copy(self) -> "Matrix":
        return Matrix(self.rows, self.cols, array("d", self.data))

    def tolist(self):
        c = self.cols
        return [list(self.data[i * c:(i + 1) * c]) for i in range(self.rows)]

    def is_finite(self) -> bool:
        return _finite(self.data)

    def __eq__(self, other):
        return (isinstance(other, Matrix) and self.shape == other.shape
                and self.data == other.data)

    def __repr__(self):
        return f"Matrix({self.rows}x{self.cols})"


class Vector:
    """Dense vector of 64-bit floats."""

    __slots__ = ("dim", "data")

    def __init__(self, dim: int, data=None):
        if dim < 0:
            raise NumericsError(f"negative vector dim {dim}")
        self.dim = dim
        if data is None:
            self.data = array("d", bytes(8 * dim))
        else:
            self.data = data if isinstance(data, array) else array("d", data)
            if len(self.data) != dim:
                raise NumericsError(
                    f"vector of dim {dim} needs {dim} entries, got {len(self.data)}")

    @classmethod
    def zeros(cls, dim: int) -> "Vector":
        return cls(dim)

    @classmethod
    def of(cls, values) -> "Vector":
        buf = array("d", values)
        return cls(len(buf), buf)

    def copy(self) -> "Vector":
        return Vector(self.dim, array("d", self.data))

    def tolist(self):
        return list(self.data)

    def as_row(self) -> Matrix:
        return Matrix(1, self.dim, array("d", self.data))

    def as_col(self) -> Matrix:
        return Matrix(self.dim, 1, array("d", self.data))

    def is_finite(self) -> bool:
        return _finite(self.data)

    def __len__(self):
        return self.dim

    def __getitem__(self, i):
        return self.data[i]

    def __setitem__(self, i, v):
        self.data[i] = v

    def __eq__(self, other):
        return (isinstance(other, Vector) and self.dim == other.dim
                and self.data == other.data)

    def __repr__(self):
        return f"Vector({self.dim})"
