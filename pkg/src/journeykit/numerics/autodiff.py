"""Minimal reverse-mode tape over Matrix values.

Every differentiable computation in the model is expressed through the op
functions below; each records a backward closure on the tape. Backward
closures accumulate (+=) into parent gradients, so evaluation order never
changes results. Ops delegate their inner loops to the active kernel backend.
"""

from __future__ import annotations

import math
from array import array

from .backend import kern
from .types import Matrix, NumericsError


class Var:
    """A tape node: a Matrix value plus an optional gradient."""

    __slots__ = ("m", "grad", "requires", "_bwd")

    def __init__(self, m: Matrix, requires: bool):
        self.m = m
        self.grad = None
        self.requires = requires
        self._bwd = None

    @property
    def shape(self):
        return self.m.shape

    def ensure_grad(self) -> Matrix:
        if self.grad is None:
            self.grad = Matrix(self.m.rows, self.m.cols)
        return self.grad


class Tape:
    """Records ops in execution order; backward walks them in reverse."""

    def __init__(self):
        self.nodes: list[Var] = []

    def leaf(self, m: Matrix, requires: bool = True) -> Var:
        v = Var(m, requires)
        self.nodes.append(v)
        return v

    def constant(self, m: Matrix) -> Var:
        return self.leaf(m, requires=False)

    def _push(self, m: Matrix, parents, bwd) -> Var:
        requires = any(p.requires for p in parents)
        v = Var(m, requires)
        if requires:
            v._bwd = bwd
        self.nodes.append(v)
        return v

    def backward(self, loss: Var) -> None:
        if loss.m.shape != (1, 1):
            raise NumericsError(f"backward needs a scalar loss, got {loss.m.shape}")
        loss.ensure_grad().data[0] = 1.0
        for node in reversed(self.nodes):
            if node._bwd is not None and node.grad is not None:
                node._bwd()


# --------------------------------------------------------------------- utils

def _acc(dst: Var, src: Matrix) -> None:
    g = dst.ensure_grad()
    kern.add_inplace(g.data, src.data, len(src.data))


def _t(m: Matrix) -> Matrix:
    out = Matrix(m.cols, m.rows)
    kern.transpose(m.data, out.data, m.rows, m.cols)
    return out


# ----------------------------------------------------------------------- ops

def matmul(tape: Tape, x: Var, y: Var) -> Var:
    if x.m.cols != y.m.rows:
        raise NumericsError(f"matmul shape mismatch: {x.shape} @ {y.shape}")
    m, k, n = x.m.rows, x.m.cols, y.m.cols
    out = Matrix(m, n)
    kern.mm(x.m.data, y.m.data, out.data, m, k, n)
    z = tape._push(out, (x, y), None)

    def bwd():
        dz = z.grad
        if x.requires:
            kern.mm_acc(dz.data, _t(y.m).data, x.ensure_grad().data, m, n, k)
        if y.requires:
            kern.mm_acc(_t(x.m).data, dz.data, y.ensure_grad().data, k, m, n)
    z._bwd = bwd if z.requires else None
    return z


def transpose(tape: Tape, x: Var) -> Var:
    z = tape._push(_t(x.m), (x,), None)

    def bwd():
        _acc(x, _t(z.grad))
    z._bwd = bwd if z.requires else None
    return z


def add(tape: Tape, x: Var, y: Var) -> Var:
    if x.shape != y.shape:
        raise NumericsError(f"add shape mismatch: {x.shape} vs {y.shape}")
    out = Matrix(x.m.rows, x.m.cols)
    kern.add(x.m.data, y.m.data, out.data, len(out.data))
    z = tape._push(out, (x, y), None)

    def bwd():
        if x.requires:
            _acc(x, z.grad)
        if y.requires:
            _acc(y, z.grad)
    z._bwd = bwd if z.requires else None
    return z


def sub(tape: Tape, x: Var, y: Var) -> Var:
    if x.shape != y.shape:
        raise NumericsError(f"sub shape mismatch: {x.shape} vs {y.shape}")
    out = Matrix(x.m.rows, x.m.cols)
    kern.sub(x.m.data, y.m.data, out.data, len(out.data))
    z = tape._push(out, (x, y), None)

    def bwd():
        if x.requires:
            _acc(x, z.grad)
        if y.requires:
            g = y.ensure_grad()
            tmp = Matrix(y.m.rows, y.m.cols)
            kern.scal(z.grad.data, -1.0, tmp.data, len(tmp.data))
            kern.add_inplace(g.data, tmp.data, len(tmp.data))
    z._bwd = bwd if z.requires else None
    return z


def hadamard(tape: Tape, x: Var, y: Var) -> Var:
    if x.shape != y.shape:
        raise NumericsError(f"hadamard shape mismatch: {x.shape} vs {y.shape}")
    out = Matrix(x.m.rows, x.m.cols)
    kern.mul(x.m.data, y.m.data, out.data, len(out.data))
    z = tape._push(out, (x, y), None)

    def bwd():
        n = len(out.data)
        tmp = Matrix(x.m.rows, x.m.cols)
        if x.requires:
            kern.mul(z.grad.data, y.m.data, tmp.data, n)
            kern.add_inplace(x.ensure_grad().data, tmp.data, n)
        if y.requires:
            kern.mul(z.grad.data, x.m.data, tmp.data, n)
            kern.add_inplace(y.ensure_grad().data, tmp.data, n)
    z._bwd = bwd if z.requires else None
    return z


def scale(tape: Tape, x: Var, alpha: float) -> Var:
    out = Matrix(x.m.rows, x.m.cols)
    kern.scal(x.m.data, alpha, out.data, len(out.data))
    z = tape._push(out, (x,), None)

    def bwd():
        tmp = Matrix(x.m.rows, x.m.cols)
        kern.scal(z.grad.data, alpha, tmp.data, len(tmp.data))
        kern.add_inplace(x.ensure_grad().data, tmp.data, len(tmp.data))
    z._bwd = bwd if z.requires else None
    return z


def scale_by_scalar_var(tape: Tape, x: Var, s: Var) -> Var:
    if s.shape != (1, 1):
        raise NumericsError(f"scalar var must be 1x1, got {s.shape}")
    out = Matrix(x.m.rows, x.m.cols)
    kern.scal(x.m.data, s.m.data[0], out.data, len(out.data))
    z = tape._push(out, (x, s), None)

    def bwd():
        n = len(out.data)
        if x.requires:
            tmp = Matrix(x.m.rows, x.m.cols)
            kern.scal(z.grad.data, s.m.data[0], tmp.data, n)
            kern.add_inplace(x.ensure_grad().data, tmp.data, n)
        if s.requires:
            s.ensure_grad().data[0] += kern.dot(z.grad.data, x.m.data, n)
    z._bwd = bwd if z.requires else None
    return z


def add_row_broadcast(tape: Tape, x: Var, b: Var) -> Var:
    """x (m x n) + b (1 x n) broadcast over rows."""
    m, n = x.shape
    if b.shape != (1, n):
        raise NumericsError(f"bias shape {b.shape} does not broadcast over {x.shape}")
    tiled = array("d", b.m.data) * m
    out = Matrix(m, n)
    kern.add(x.m.data, tiled, out.data, m * n)
    z = tape._push(out, (x, b), None)

    def bwd():
        if x.requires:
            _acc(x, z.grad)
        if b.requires:
            ones = array("d", [1.0] * m)
            kern.mm_acc(ones, z.grad.data, b.ensure_grad().data, 1, m, n)
    z._bwd = bwd if z.requires else None
    return z


def add_scalar_broadcast(tape: Tape, x: Var, s: Var) -> Var:
    """x + s with s a 1x1 Var added to every entry."""
    if s.shape != (1, 1):
        raise NumericsError(f"scalar var must be 1x1, got {s.shape}")
    out = Matrix(x.m.rows, x.m.cols)
    kern.add_scalar(x.m.data, s.m.data[0], out.data, len(out.data))
    z = tape._push(out, (x, s), None)

    def bwd():
        if x.requires:
            _acc(x, z.grad)
        if s.requires:
            s.ensure_grad().data[0] += kern.reduce_sum(z.grad.data, len(out.data))
    z._bwd = bwd if z.requires else None
    return z


def rotate(tape: Tape, x: Var, ang: Var) -> Var:
    """Block-rotate row pairs of x. ang is 1 x n/2 (shared) or m x n/2."""
    m, n = x.shape
    if n % 2:
        raise NumericsError(f"rotate needs even cols, got {n}")
    h = n // 2
    if ang.shape == (1, h):
        stride = 0
    elif ang.shape == (m, h):
        stride = h
    else:
        raise NumericsError(f"angle shape {ang.shape} does not fit {x.shape}")
    out = Matrix(m, n)
    kern.rotate_rows(x.m.data, ang.m.data, out.data, m, n, stride)
    z = tape._push(out, (x, ang), None)

    def bwd():
        dx = x.ensure_grad() if x.requires else Matrix(m, n)
        dang = ang.ensure_grad() if ang.requires else Matrix(*ang.shape)
        kern.rotate_rows_bwd(x.m.data, ang.m.data, z.grad.data,
                             dx.data, dang.data, m, n, stride)
    z._bwd = bwd if z.requires else None
    return z


def colscale(tape: Tape, x: Var, d: Var) -> Var:
    """Scale column j of x by d[0, j]."""
    m, n = x.shape
    if d.shape != (1, n):
        raise NumericsError(f"diag shape {d.shape} does not fit {x.shape}")
    out = Matrix(m, n)
    kern.colscale(x.m.data, d.m.data, out.data, m, n)
    z = tape._push(out, (x, d), None)

    def bwd():
        dx = x.ensure_grad() if x.requires else Matrix(m, n)
        dd = d.ensure_grad() if d.requires else Matrix(1, n)
        kern.colscale_bwd(x.m.data, d.m.data, z.grad.data, dx.data, dd.data, m, n)
    z._bwd = bwd if z.requires else None
    return z


def gather_rows(tape: Tape, x: Var, idx) -> Var:
    k = len(idx)
    n = x.m.cols
    ibuf = idx if isinstance(idx, array) else array("q", idx)
    out = Matrix(k, n)
    kern.gather_rows(x.m.data, ibuf, out.data, k, n)
    z = tape._push(out, (x,), None)

    def bwd():
        kern.scatter_add_rows(x.ensure_grad().data, ibuf, z.grad.data, k, n)
    z._bwd = bwd if z.requires else None
    return z


def gather_cols(tape: Tape, x: Var, j0: int, w: int) -> Var:
    m, n = x.shape
    out = Matrix(m, w)
    kern.gather_cols(x.m.data, j0, w, out.data, m, n)
    z = tape._push(out, (x,), None)

    def bwd():
        kern.scatter_add_cols(x.ensure_grad().data, j0, w, z.grad.data, m, n)
    z._bwd = bwd if z.requires else None
    return z


def concat_cols(tape: Tape, parts: list[Var]) -> Var:
    m = parts[0].m.rows
    widths = [p.m.cols for p in parts]
    n = sum(widths)
    out = Matrix(m, n)
    j0 = 0
    for p, w in zip(parts, widths):
        kern.scatter_add_cols(out.data, j0, w, p.m.data, m, n)
        j0 += w
    z = tape._push(out, tuple(parts), None)

    def bwd():
        j = 0
        for p, w in zip(parts, widths):
            if p.requires:
                tmp = Matrix(m, w)
                kern.gather_cols(z.grad.data, j, w, tmp.data, m, n)
                kern.add_inplace(p.ensure_grad().data, tmp.data, m * w)
            j += w
    z._bwd = bwd if z.requires else None
    return z


def stack_rows(tape: Tape, parts: list[Var]) -> Var:
    n = parts[0].m.cols
    rows = [p.m.rows for p in parts]
    out = Matrix(sum(rows), n)
    off = 0
    for p in parts:
        sz = len(p.m.data)
        out.data[off:off + sz] = p.m.data
        off += sz
    z = tape._push(out, tuple(parts), None)

    def bwd():
        off2 = 0
        for p in parts:
            sz = len(p.m.data)
            if p.requires:
                tmp = Matrix(p.m.rows, n, z.grad.data[off2:off2 + sz])
                kern.add_inplace(p.ensure_grad().data, tmp.data, sz)
            off2 += sz
    z._bwd = bwd if z.requires else None
    return z


def masked_softmax(tape: Tape, s: Var, mask: bytearray) -> Var:
    m, n = s.shape
    if len(mask) != m * n:
        raise NumericsError(f"mask length {len(mask)} != {m}x{n}")
    out = Matrix(m, n)
    bad = kern.masked_softmax(s.m.data, mask, out.data, m, n)
    if bad >= 0:
        raise NumericsError(f"fully-masked attention row {bad}")
    z = tape._push(out, (s,), None)

    def bwd():
        kern.masked_softmax_bwd(out.data, z.grad.data, mask,
                                s.ensure_grad().data, m, n)
    z._bwd = bwd if z.requires else None
    return z


def layernorm(tape: Tape, x: Var, gain: Var, offset: Var,
              eps: float = 1e-5) -> Var:
    m, n = x.shape
    if gain.shape != (1, n) or offset.shape != (1, n):
        raise NumericsError("layernorm gain/offset must be 1 x cols")
    out = Matrix(m, n)
    mean = array("d", bytes(8 * m))
    rstd = array("d", bytes(8 * m))
    kern.layernorm(x.m.data, gain.m.data, offset.m.data, out.data,
                   mean, rstd, m, n, eps)
    z = tape._push(out, (x, gain, offset), None)

    def bwd():
        dx = x.ensure_grad() if x.requires else Matrix(m, n)
        dg = gain.ensure_grad() if gain.requires else Matrix(1, n)
        do = offset.ensure_grad() if offset.requires else Matrix(1, n)
        kern.layernorm_bwd(x.m.data, gain.m.data, mean, rstd, z.grad.data,
                           dx.data, dg.data, do.data, m, n)
    z._bwd = bwd if z.requires else None
    return z


def tanh(tape: Tape, x: Var) -> Var:
    out = Matrix(x.m.rows, x.m.cols)
    kern.tanh_fwd(x.m.data, out.data, len(out.data))
    z = tape._push(out, (x,), None)

    def bwd():
        kern.tanh_bwd(out.data, z.grad.data, x.ensure_grad().data,
                      len(out.data))
    z._bwd = bwd if z.requires else None
    return z


def exp(tape: Tape, x: Var) -> Var:
    out = Matrix(x.m.rows, x.m.cols)
    kern.exp_v(x.m.data, out.data, len(out.data))
    z = tape._push(out, (x,), None)

    def bwd():
        n = len(out.data)
        tmp = Matrix(x.m.rows, x.m.cols)
        kern.mul(z.grad.data, out.data, tmp.data, n)
        kern.add_inplace(x.ensure_grad().data, tmp.data, n)
    z._bwd = bwd if z.requires else None
    return z


def clamp(tape: Tape, x: Var, lo: float, hi: float) -> Var:
    """Hard clamp with pass-through gradient strictly inside [lo, hi]."""
    size = len(x.m.data)
    out = Matrix(x.m.rows, x.m.cols)
    passmask = bytearray(size)
    kern.clamp_v(x.m.data, lo, hi, out.data, passmask, size)
    fmask = Matrix(x.m.rows, x.m.cols, array("d", (float(b) for b in passmask)))
    z = tape._push(out, (x,), None)

    def bwd():
        tmp = Matrix(x.m.rows, x.m.cols)
        kern.mul(z.grad.data, fmask.data, tmp.data, size)
        kern.add_inplace(x.ensure_grad().data, tmp.data, size)
    z._bwd = bwd if z.requires else None
    return z


def inverse(tape: Tape, x: Var) -> Var:
    n = x.m.rows
    if x.m.cols != n:
        raise NumericsError(f"inverse of non-square {x.shape}")
    out = Matrix(n, n)
    if kern.mat_inverse(x.m.data, out.data, n):
        raise NumericsError(f"singular matrix in inverse ({n}x{n})")
    z = tape._push(out, (x,), None)

    def bwd():
        # dX += -Y^T dZ Y^T  with Y = X^{-1}
        yt = _t(out)
        t1 = Matrix(n, n)
        kern.mm(yt.data, z.grad.data, t1.data, n, n, n)
        t2 = Matrix(n, n)
        kern.mm(t1.data, yt.data, t2.data, n, n, n)
        kern.scal(t2.data, -1.0, t2.data, n * n)
        kern.add_inplace(x.ensure_grad().data, t2.data, n * n)
    z._bwd = bwd if z.requires else None
    return z


def pair_gather(tape: Tape, vals: Var, idx, rows: int, cols: int) -> Var:
    """Build a rows x cols matrix from a flat value table; idx < 0 reads 0."""
    if vals.m.rows != 1:
        raise NumericsError("pair_gather expects a 1 x K value table")
    ibuf = idx if isinstance(idx, array) else array("q", idx)
    if len(ibuf) != rows * cols:
        raise NumericsError(f"index length {len(ibuf)} != {rows}x{cols}")
    out = Matrix(rows, cols)
    kern.pair_gather(vals.m.data, ibuf, out.data, rows * cols)
    z = tape._push(out, (vals,), None)

    def bwd():
        kern.pair_scatter_add(vals.ensure_grad().data, ibuf, z.grad.data,
                              rows * cols)
    z._bwd = bwd if z.requires else None
    return z


def cross_entropy(tape: Tape, logits: Var, targets) -> Var:
    """Mean cross-entropy of softmax rows against integer targets."""
    m, n = logits.shape
    tbuf = targets if isinstance(targets, array) else array("q", targets)
    if len(tbuf) != m:
        raise NumericsError(f"{len(tbuf)} targets for {m} rows")
    probs = Matrix(m, n)
    loss = kern.ce_fwd(logits.m.data, tbuf, probs.data, m, n)
    z = tape._push(Matrix(1, 1, [loss]), (logits,), None)

    def bwd():
        kern.ce_bwd(probs.data, tbuf, z.grad.data[0],
                    logits.ensure_grad().data, m, n)
    z._bwd = bwd if z.requires else None
    return z


def sum_all(tape: Tape, x: Var) -> Var:
    total = kern.reduce_sum(x.m.data, len(x.m.data))
    z = tape._push(Matrix(1, 1, [total]), (x,), None)

    def bwd():
        g = x.ensure_grad()
        kern.add_scalar(g.data, z.grad.data[0], g.data, len(g.data))
    z._bwd = bwd if z.requires else None
    return z


def mean_all(tape: Tape, x: Var) -> Var:
    return scale(tape, sum_all(tape, x), 1.0 / len(x.m.data))


def sqrt_scalar(tape: Tape, x: Var) -> Var:
    if x.shape != (1, 1):
        raise NumericsError("sqrt_scalar expects a 1x1 var")
    y = math.sqrt(x.m.data[0])
    z = tape._push(Matrix(1, 1, [y]), (x,), None)

    def bwd():
        x.ensure_grad().data[0] += z.grad.data[0] * 0.5 / y
    z._bwd = bwd if z.requires else None
    return z


def recip_scalar(tape: Tape, x: Var) -> Var:
    if x.shape != (1, 1):
        raise NumericsError("recip_scalar expects a 1x1 var")
    y = 1.0 / x.m.data[0]
    z = tape._push(Matrix(1, 1, [y]), (x,), None)

    def bwd():
        x.ensure_grad().data[0] += -z.grad.data[0] * y * y
    z._bwd = bwd if z.requires else None
    return z
