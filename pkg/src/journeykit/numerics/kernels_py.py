"""Pure-Python kernel backend.

Every function here has a signature-identical twin in the compiled extension
``_kernels``; whichever backend is active is chosen at import time (see
``backend.py``). All buffers are flat: ``array('d')`` for floats,
``array('q')`` for indices, ``bytearray`` for masks. Accumulation order is
fixed (ascending index) so the two backends produce bit-identical results.

Gradient kernels (``*_bwd``) accumulate (+=) into every gradient buffer;
forward kernels overwrite their outputs.
"""

import math

NAME = "pure"


# ---------------------------------------------------------------- basic BLAS

def mm(a, b, out, m, k, n):
    """out[m,n] = a[m,k] @ b[k,n]; inner sum in ascending k order."""
    for j in range(n):
        col = b[j::n]
        base = 0
        for i in range(m):
            row = a[base:base + k]
            out[i * n + j] = sum(map(_dmul, row, col))
            base += k


def mm_acc(a, b, out, m, k, n):
    """out[m,n] += a[m,k] @ b[k,n]."""
    for j in range(n):
        col = b[j::n]
        base = 0
        for i in range(m):
            row = a[base:base + k]
            out[i * n + j] += sum(map(_dmul, row, col))
            base += k


def _dmul(x, y):
    return x * y


def transpose(a, out, m, n):
    for i in range(m):
        base = i * n
        for j in range(n):
            out[j * m + i] = a[base + j]


def add(a, b, out, n):
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(a, b, out, n):
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(a, b, out, n):
    for i in range(n):
        out[i] = a[i] * b[i]


def add_inplace(dst, src, n):
    for i in range(n):
        dst[i] += src[i]


def scal(a, alpha, out, n):
    for i in range(n):
        out[i] = a[i] * alpha


def add_scalar(a, s, out, n):
    for i in range(n):
        out[i] = a[i] + s


def dot(a, b, n):
    acc = 0.0
    for i in range(n):
        acc += a[i] * b[i]
    return acc


def reduce_sum(a, n):
    acc = 0.0
    for i in range(n):
        acc += a[i]
    return acc


def sq_norm(a, n):
    acc = 0.0
    for i in range(n):
        acc += a[i] * a[i]
    return acc


# ----------------------------------------------------------------- softmax

def masked_softmax(s, mask, out, m, n):
    """Row-wise softmax over unmasked entries; masked entries get exactly 0.

    Returns -1 on success or the index of the first fully-masked row.
    """
    for i in range(m):
        base = i * n
        hi = -math.inf
        for j in range(n):
            if mask[base + j] and s[base + j] > hi:
                hi = s[base + j]
        if hi == -math.inf:
            return i
        tot = 0.0
        for j in range(n):
            if mask[base + j]:
                e = math.exp(s[base + j] - hi)
                out[base + j] = e
                tot += e
            else:
                out[base + j] = 0.0
        for j in range(n):
            if mask[base + j]:
                out[base + j] /= tot
    return -1


def masked_softmax_bwd(p, dp, mask, out, m, n):
    """out += dsoftmax: p * (dp - sum_j dp_j p_j) per row, 0 where masked."""
    for i in range(m):
        base = i * n
        acc = 0.0
        for j in range(n):
            if mask[base + j]:
                acc += dp[base + j] * p[base + j]
        for j in range(n):
            if mask[base + j]:
                out[base + j] += p[base + j] * (dp[base + j] - acc)


# --------------------------------------------------------------- layer norm

def layernorm(x, gain, offset, out, mean, rstd, m, n, eps):
    for i in range(m):
        base = i * n
        mu = 0.0
        for j in range(n):
            mu += x[base + j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[base + j] - mu
            var += d * d
        var /= n
        r = 1.0 / math.sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(n):
            out[base + j] = (x[base + j] - mu) * r * gain[j] + offset[j]


def layernorm_bwd(x, gain, mean, rstd, dy, dx, dgain, doffset, m, n):
    for i in range(m):
        base = i * n
        mu = mean[i]
        r = rstd[i]
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            xh = (x[base + j] - mu) * r
            g = dy[base + j] * gain[j]
            s1 += g
            s2 += g * xh
            dgain[j] += dy[base + j] * xh
            doffset[j] += dy[base + j]
        s1 /= n
        s2 /= n
        for j in range(n):
            xh = (x[base + j] - mu) * r
            g = dy[base + j] * gain[j]
            dx[base + j] += r * (g - s1 - xh * s2)


# ------------------------------------------------------------ nonlinearities

def tanh_fwd(x, out, n):
    for i in range(n):
        out[i] = math.tanh(x[i])


def tanh_bwd(y, dy, dx, n):
    for i in range(n):
        dx[i] += dy[i] * (1.0 - y[i] * y[i])


def exp_v(x, out, n):
    for i in range(n):
        out[i] = math.exp(x[i])


def clamp_v(x, lo, hi, out, passmask, n):
    """Clamp to [lo, hi]; passmask[i]=1 where the value was strictly inside."""
    for i in range(n):
        v = x[i]
        if v < lo:
            out[i] = lo
            passmask[i] = 0
        elif v > hi:
            out[i] = hi
            passmask[i] = 0
        else:
            out[i] = v
            passmask[i] = 1


# ------------------------------------------------------------- rotations

def rotate_rows(x, ang, out, m, n, ang_stride):
    """Rotate adjacent pairs of each row: block-diagonal 2x2 rotations.

    ang holds n/2 angles per row (stride ``ang_stride``; 0 broadcasts one row).
    """
    h = n >> 1
    for i in range(m):
        base = i * n
        abase = i * ang_stride
        for t in range(h):
            c = math.cos(ang[abase + t])
            s = math.sin(ang[abase + t])
            x0 = x[base + 2 * t]
            x1 = x[base + 2 * t + 1]
            out[base + 2 * t] = x0 * c - x1 * s
            out[base + 2 * t + 1] = x0 * s + x1 * c


def rotate_rows_bwd(x, ang, dy, dx, dang, m, n, ang_stride):
    h = n >> 1
    for i in range(m):
        base = i * n
        abase = i * ang_stride
        for t in range(h):
            c = math.cos(ang[abase + t])
            s = math.sin(ang[abase + t])
            x0 = x[base + 2 * t]
            x1 = x[base + 2 * t + 1]
            g0 = dy[base + 2 * t]
            g1 = dy[base + 2 * t + 1]
            dx[base + 2 * t] += g0 * c + g1 * s
            dx[base + 2 * t + 1] += -g0 * s + g1 * c
            dang[abase + t] += (g0 * (-x0 * s - x1 * c)
                                + g1 * (x0 * c - x1 * s))


# ------------------------------------------------------------ column scaling

def colscale(x, d, out, m, n):
    for i in range(m):
        base = i * n
        for j in range(n):
            out[base + j] = x[base + j] * d[j]


def colscale_bwd(x, d, dy, dx, dd, m, n):
    for i in range(m):
        base = i * n
        for j in range(n):
            dx[base + j] += dy[base + j] * d[j]
            dd[j] += dy[base + j] * x[base + j]


# ------------------------------------------------------- gather and scatter

def gather_rows(src, idx, out, k, n):
    for i in range(k):
        sb = idx[i] * n
        ob = i * n
        for j in range(n):
            out[ob + j] = src[sb + j]


def scatter_add_rows(dst, idx, src, k, n):
    for i in range(k):
        db = idx[i] * n
        sb = i * n
        for j in range(n):
            dst[db + j] += src[sb + j]


def gather_cols(src, j0, w, out, m, n):
    for i in range(m):
        sb = i * n + j0
        ob = i * w
        for j in range(w):
            out[ob + j] = src[sb + j]


def scatter_add_cols(dst, j0, w, src, m, n):
    for i in range(m):
        db = i * n + j0
        sb = i * w
        for j in range(w):
            dst[db + j] += src[sb + j]


def pair_gather(vals, idx, out, size):
    """out[i] = vals[idx[i]], or 0 where idx[i] < 0."""
    for i in range(size):
        t = idx[i]
        out[i] = vals[t] if t >= 0 else 0.0


def pair_scatter_add(dvals, idx, dy, size):
    for i in range(size):
        t = idx[i]
        if t >= 0:
            dvals[t] += dy[i]


# -------------------------------------------------------------- cross entropy

def ce_fwd(logits, targets, probs, m, n):
    """Mean negative log-likelihood of targets; softmax rows cached in probs."""
    loss = 0.0
    for i in range(m):
        base = i * n
        hi = logits[base]
        for j in range(1, n):
            if logits[base + j] > hi:
                hi = logits[base + j]
        tot = 0.0
        for j in range(n):
            e = math.exp(logits[base + j] - hi)
            probs[base + j] = e
            tot += e
        for j in range(n):
            probs[base + j] /= tot
        loss += math.log(tot) + hi - logits[base + targets[i]]
    return loss / m


def ce_bwd(probs, targets, scale, dlogits, m, n):
    """dlogits += scale * (softmax - onehot) / m."""
    for i in range(m):
        base = i * n
        for j in range(n):
            g = probs[base + j]
            if j == targets[i]:
                g -= 1.0
            dlogits[base + j] += scale * g / m
    return None


# ------------------------------------------------------------ dense inverse

def mat_inverse(a, out, n):
    """Gauss-Jordan inverse with partial pivoting (first max wins ties).

    Returns 0 on success, 1 if a pivot is exactly zero. ``a`` is unchanged.
    """
    work = list(a[:n * n])
    for i in range(n):
        for j in range(n):
            out[i * n + j] = 1.0 if i == j else 0.0
    for c in range(n):
        piv = c
        best = abs(work[c * n + c])
        for r in range(c + 1, n):
            v = abs(work[r * n + c])
            if v > best:
                best = v
                piv = r
        if best == 0.0:
            return 1
        if piv != c:
            for j in range(n):
                work[c * n + j], work[piv * n + j] = work[piv * n + j], work[c * n + j]
                out[c * n + j], out[piv * n + j] = out[piv * n + j], out[c * n + j]
        d = work[c * n + c]
        for j in range(n):
            work[c * n + j] /= d
            out[c * n + j] /= d
        for r in range(n):
            if r == c:
                continue
            f = work[r * n + c]
            if f != 0.0:
                for j in range(n):
                    work[r * n + j] -= f * work[c * n + j]
                    out[r * n + j] -= f * out[c * n + j]
    return 0


# ----------------------------------------------------------------- optimizer

def adam_step(p, g, mbuf, vbuf, n, lr, b1, b2, eps, bc1, bc2):
    """In-place Adam update with precomputed bias corrections bc1, bc2."""
    for i in range(n):
        gi = g[i]
        mbuf[i] = b1 * mbuf[i] + (1.0 - b1) * gi
        vbuf[i] = b2 * vbuf[i] + (1.0 - b2) * gi * gi
        mhat = mbuf[i] / bc1
        vhat = vbuf[i] / bc2
        p[i] -= lr * mhat / (math.sqrt(vhat) + eps)
