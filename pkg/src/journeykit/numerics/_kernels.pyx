# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernel backend.

Signature-identical twin of ``kernels_py``. Loops accumulate in the same
ascending order and the extension is built with contraction disabled, so
results match the pure backend bit for bit (both sides round through IEEE
doubles and call the same libm).
"""

from libc.math cimport cos, exp, fabs, log, sin, sqrt, tanh, INFINITY
from libc.stdlib cimport free, malloc

NAME = "compiled"


# ---------------------------------------------------------------- basic BLAS

def mm(double[::1] a, double[::1] b, double[::1] out, int m, int k, int n):
    cdef int i, j, t
    cdef double acc
    for j in range(n):
        for i in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i * k + t] * b[t * n + j]
            out[i * n + j] = acc


def mm_acc(double[::1] a, double[::1] b, double[::1] out, int m, int k, int n):
    cdef int i, j, t
    cdef double acc
    for j in range(n):
        for i in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i * k + t] * b[t * n + j]
            out[i * n + j] += acc


def transpose(double[::1] a, double[::1] out, int m, int n):
    cdef int i, j
    for i in range(m):
        for j in range(n):
            out[j * m + i] = a[i * n + j]


def add(double[::1] a, double[::1] b, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = a[i] + b[i]


def sub(double[::1] a, double[::1] b, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = a[i] - b[i]


def mul(double[::1] a, double[::1] b, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = a[i] * b[i]


def add_inplace(double[::1] dst, double[::1] src, int n):
    cdef int i
    for i in range(n):
        dst[i] += src[i]


def scal(double[::1] a, double alpha, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = a[i] * alpha


def add_scalar(double[::1] a, double s, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = a[i] + s


def dot(double[::1] a, double[::1] b, int n):
    cdef int i
    cdef double acc = 0.0
    for i in range(n):
        acc += a[i] * b[i]
    return acc


def reduce_sum(double[::1] a, int n):
    cdef int i
    cdef double acc = 0.0
    for i in range(n):
        acc += a[i]
    return acc


def sq_norm(double[::1] a, int n):
    cdef int i
    cdef double acc = 0.0
    for i in range(n):
        acc += a[i] * a[i]
    return acc


# ----------------------------------------------------------------- softmax

def masked_softmax(double[::1] s, unsigned char[::1] mask, double[::1] out,
                   int m, int n):
    cdef int i, j, base
    cdef double hi, tot, e
    for i in range(m):
        base = i * n
        hi = -INFINITY
        for j in range(n):
            if mask[base + j] and s[base + j] > hi:
                hi = s[base + j]
        if hi == -INFINITY:
            return i
        tot = 0.0
        for j in range(n):
            if mask[base + j]:
                e = exp(s[base + j] - hi)
                out[base + j] = e
                tot += e
            else:
                out[base + j] = 0.0
        for j in range(n):
            if mask[base + j]:
                out[base + j] /= tot
    return -1


def masked_softmax_bwd(double[::1] p, double[::1] dp, unsigned char[::1] mask,
                       double[::1] out, int m, int n):
    cdef int i, j, base
    cdef double acc
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

def layernorm(double[::1] x, double[::1] gain, double[::1] offset,
              double[::1] out, double[::1] mean, double[::1] rstd,
              int m, int n, double eps):
    cdef int i, j, base
    cdef double mu, var, d, r
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
        r = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(n):
            out[base + j] = (x[base + j] - mu) * r * gain[j] + offset[j]


def layernorm_bwd(double[::1] x, double[::1] gain, double[::1] mean,
                  double[::1] rstd, double[::1] dy, double[::1] dx,
                  double[::1] dgain, double[::1] doffset, int m, int n):
    cdef int i, j, base
    cdef double mu, r, s1, s2, xh, g
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

def tanh_fwd(double[::1] x, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = tanh(x[i])


def tanh_bwd(double[::1] y, double[::1] dy, double[::1] dx, int n):
    cdef int i
    for i in range(n):
        dx[i] += dy[i] * (1.0 - y[i] * y[i])


def exp_v(double[::1] x, double[::1] out, int n):
    cdef int i
    for i in range(n):
        out[i] = exp(x[i])


def clamp_v(double[::1] x, double lo, double hi, double[::1] out,
            unsigned char[::1] passmask, int n):
    cdef int i
    cdef double v
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

def rotate_rows(double[::1] x, double[::1] ang, double[::1] out,
                int m, int n, int ang_stride):
    cdef int i, t, base, abase, h = n >> 1
    cdef double c, s, x0, x1
    for i in range(m):
        base = i * n
        abase = i * ang_stride
        for t in range(h):
            c = cos(ang[abase + t])
            s = sin(ang[abase + t])
            x0 = x[base + 2 * t]
            x1 = x[base + 2 * t + 1]
            out[base + 2 * t] = x0 * c - x1 * s
            out[base + 2 * t + 1] = x0 * s + x1 * c


def rotate_rows_bwd(double[::1] x, double[::1] ang, double[::1] dy,
                    double[::1] dx, double[::1] dang,
                    int m, int n, int ang_stride):
    cdef int i, t, base, abase, h = n >> 1
    cdef double c, s, x0, x1, g0, g1
    for i in range(m):
        base = i * n
        abase = i * ang_stride
        for t in range(h):
            c = cos(ang[abase + t])
            s = sin(ang[abase + t])
            x0 = x[base + 2 * t]
            x1 = x[base + 2 * t + 1]
            g0 = dy[base + 2 * t]
            g1 = dy[base + 2 * t + 1]
            dx[base + 2 * t] += g0 * c + g1 * s
            dx[base + 2 * t + 1] += -g0 * s + g1 * c
            dang[abase + t] += (g0 * (-x0 * s - x1 * c)
                                + g1 * (x0 * c - x1 * s))


# ------------------------------------------------------------ column scaling

def colscale(double[::1] x, double[::1] d, double[::1] out, int m, int n):
    cdef int i, j, base
    for i in range(m):
        base = i * n
        for j in range(n):
            out[base + j] = x[base + j] * d[j]


def colscale_bwd(double[::1] x, double[::1] d, double[::1] dy,
                 double[::1] dx, double[::1] dd, int m, int n):
    cdef int i, j, base
    for i in range(m):
        base = i * n
        for j in range(n):
            dx[base + j] += dy[base + j] * d[j]
            dd[j] += dy[base + j] * x[base + j]


# ------------------------------------------------------- gather and scatter

def gather_rows(double[::1] src, long long[::1] idx, double[::1] out,
                int k, int n):
    cdef int i, j
    cdef long long sb
    for i in range(k):
        sb = idx[i] * n
        for j in range(n):
            out[i * n + j] = src[sb + j]


def scatter_add_rows(double[::1] dst, long long[::1] idx, double[::1] src,
                     int k, int n):
    cdef int i, j
    cdef long long db
    for i in range(k):
        db = idx[i] * n
        for j in range(n):
            dst[db + j] += src[i * n + j]


def gather_cols(double[::1] src, int j0, int w, double[::1] out, int m, int n):
    cdef int i, j
    for i in range(m):
        for j in range(w):
            out[i * w + j] = src[i * n + j0 + j]


def scatter_add_cols(double[::1] dst, int j0, int w, double[::1] src,
                     int m, int n):
    cdef int i, j
    for i in range(m):
        for j in range(w):
            dst[i * n + j0 + j] += src[i * w + j]


def pair_gather(double[::1] vals, long long[::1] idx, double[::1] out,
                int size):
    cdef int i
    cdef long long t
    for i in range(size):
        t = idx[i]
        out[i] = vals[t] if t >= 0 else 0.0


def pair_scatter_add(double[::1] dvals, long long[::1] idx, double[::1] dy,
                     int size):
    cdef int i
    cdef long long t
    for i in range(size):
        t = idx[i]
        if t >= 0:
            dvals[t] += dy[i]


# -------------------------------------------------------------- cross entropy

def ce_fwd(double[::1] logits, long long[::1] targets, double[::1] probs,
           int m, int n):
    cdef int i, j, base
    cdef double hi, tot, e, loss = 0.0
    for i in range(m):
        base = i * n
        hi = logits[base]
        for j in range(1, n):
            if logits[base + j] > hi:
                hi = logits[base + j]
        tot = 0.0
        for j in range(n):
            e = exp(logits[base + j] - hi)
            probs[base + j] = e
            tot += e
        for j in range(n):
            probs[base + j] /= tot
        loss += log(tot) + hi - logits[base + targets[i]]
    return loss / m


def ce_bwd(double[::1] probs, long long[::1] targets, double scale,
           double[::1] dlogits, int m, int n):
    cdef int i, j, base
    cdef double g
    for i in range(m):
        base = i * n
        for j in range(n):
            g = probs[base + j]
            if j == targets[i]:
                g -= 1.0
            dlogits[base + j] += scale * g / m
    return None


# ------------------------------------------------------------ dense inverse

def mat_inverse(double[::1] a, double[::1] out, int n):
    cdef int i, j, c, r, piv
    cdef double best, v, d, f, tmp
    cdef double *work = <double *> malloc(n * n * sizeof(double))
    if work is NULL:
        raise MemoryError()
    try:
        for i in range(n * n):
            work[i] = a[i]
        for i in range(n):
            for j in range(n):
                out[i * n + j] = 1.0 if i == j else 0.0
        for c in range(n):
            piv = c
            best = fabs(work[c * n + c])
            for r in range(c + 1, n):
                v = fabs(work[r * n + c])
                if v > best:
                    best = v
                    piv = r
            if best == 0.0:
                return 1
            if piv != c:
                for j in range(n):
                    tmp = work[c * n + j]
                    work[c * n + j] = work[piv * n + j]
                    work[piv * n + j] = tmp
                    tmp = out[c * n + j]
                    out[c * n + j] = out[piv * n + j]
                    out[piv * n + j] = tmp
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
    finally:
        free(work)


# ----------------------------------------------------------------- optimizer

def adam_step(double[::1] p, double[::1] g, double[::1] mbuf, double[::1] vbuf,
              int n, double lr, double b1, double b2, double eps,
              double bc1, double bc2):
    cdef int i
    cdef double gi, mhat, vhat
    for i in range(n):
        gi = g[i]
        mbuf[i] = b1 * mbuf[i] + (1.0 - b1) * gi
        vbuf[i] = b2 * vbuf[i] + (1.0 - b2) * gi * gi
        mhat = mbuf[i] / bc1
        vhat = vbuf[i] / bc2
        p[i] -= lr * mhat / (sqrt(vhat) + eps)
