# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``.

Each row is reduced sequentially in index order, so results are
bit-reproducible for a given input regardless of caller.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf, sqrt, erf, erff

cnp.import_array()

NAME = "compiled"

cdef double SQRT_HALF = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


cdef inline floating _exp(floating v) noexcept nogil:
    if floating is float:
        return expf(v)
    else:
        return exp(v)


cdef inline floating _erf(floating v) noexcept nogil:
    if floating is float:
        return erff(v)
    else:
        return erf(v)


def _as2d(x):
    x = np.ascontiguousarray(x)
    return x.reshape(-1, x.shape[x.ndim - 1])


cdef void _shift_rows(floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, j, rows = x.shape[0], n = x.shape[1]
    cdef floating m
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, n):
            if x[r, j] > m:
                m = x[r, j]
        for j in range(n):
            y[r, j] = x[r, j] - m


cdef void _normalize_rows(floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, j, rows = y.shape[0], n = y.shape[1]
    cdef double s
    cdef floating inv
    for r in range(rows):
        s = 0.0
        for j in range(n):
            s += y[r, j]
        inv = <floating>(1.0 / s)
        for j in range(n):
            y[r, j] = y[r, j] * inv


def softmax_forward(x):
    # The exponential goes through numpy's vectorized exp; libm's scalar
    # exp in a C loop is several times slower.
    shape = x.shape
    x2 = _as2d(x)
    y = np.empty_like(x2)
    if x2.dtype == np.float32:
        _shift_rows[float](x2, y)
        np.exp(y, out=y)
        _normalize_rows[float](y)
    else:
        _shift_rows[double](x2, y)
        np.exp(y, out=y)
        _normalize_rows[double](y)
    return y.reshape(shape)


cdef void _softmax_back_rows(floating[:, ::1] y, floating[:, ::1] g,
                             floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t r, j, rows = y.shape[0], n = y.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for j in range(n):
            dot += g[r, j] * y[r, j]
        for j in range(n):
            out[r, j] = <floating>(y[r, j] * (g[r, j] - dot))


def softmax_backward(y, grad):
    shape = y.shape
    y2 = _as2d(y)
    g2 = _as2d(grad).astype(y2.dtype, copy=False)
    out = np.empty_like(y2)
    if y2.dtype == np.float32:
        _softmax_back_rows[float](y2, g2, out)
    else:
        _softmax_back_rows[double](y2, g2, out)
    return out.reshape(shape)


cdef void _ln_rows(floating[:, ::1] x, floating[::1] gain, floating[::1] shift,
                   double eps, floating[:, ::1] y, floating[:, ::1] xhat,
                   floating[::1] rstd) noexcept nogil:
    cdef Py_ssize_t r, j, rows = x.shape[0], n = x.shape[1]
    cdef double mean, var, d, rs
    for r in range(rows):
        mean = 0.0
        for j in range(n):
            mean += x[r, j]
        mean /= n
        var = 0.0
        for j in range(n):
            d = x[r, j] - mean
            var += d * d
        var /= n
        rs = 1.0 / sqrt(var + eps)
        rstd[r] = <floating>rs
        for j in range(n):
            xhat[r, j] = <floating>((x[r, j] - mean) * rs)
            y[r, j] = <floating>(xhat[r, j] * gain[j] + shift[j])


def layer_norm_forward(x, gain, shift, eps):
    x2 = _as2d(x)
    gain = np.ascontiguousarray(gain, dtype=x2.dtype)
    shift = np.ascontiguousarray(shift, dtype=x2.dtype)
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    rstd = np.empty(x2.shape[0], dtype=x2.dtype)
    if x2.dtype == np.float32:
        _ln_rows[float](x2, gain, shift, eps, y, xhat, rstd)
    else:
        _ln_rows[double](x2, gain, shift, eps, y, xhat, rstd)
    return y, xhat, rstd


cdef void _ln_back_rows(floating[:, ::1] g, floating[:, ::1] xhat,
                        floating[::1] rstd, floating[::1] gain,
                        floating[:, ::1] gx, double[::1] ggain,
                        double[::1] gshift) noexcept nogil:
    cdef Py_ssize_t r, j, rows = g.shape[0], n = g.shape[1]
    cdef double m1, m2, v
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(n):
            v = g[r, j] * gain[j]
            m1 += v
            m2 += v * xhat[r, j]
            ggain[j] += g[r, j] * xhat[r, j]
            gshift[j] += g[r, j]
        m1 /= n
        m2 /= n
        for j in range(n):
            gx[r, j] = <floating>((g[r, j] * gain[j] - m1 - xhat[r, j] * m2) * rstd[r])


def layer_norm_backward(grad, xhat, rstd, gain):
    g2 = _as2d(grad).astype(xhat.dtype, copy=False)
    gain = np.ascontiguousarray(gain, dtype=xhat.dtype)
    gx = np.empty_like(g2)
    ggain = np.zeros(g2.shape[1], dtype=np.float64)
    gshift = np.zeros(g2.shape[1], dtype=np.float64)
    if g2.dtype == np.float32:
        _ln_back_rows[float](g2, xhat, rstd, gain, gx, ggain, gshift)
    else:
        _ln_back_rows[double](g2, xhat, rstd, gain, gx, ggain, gshift)
    return gx, ggain.astype(g2.dtype), gshift.astype(g2.dtype)


cdef void _gelu(floating[::1] x, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v
    cdef floating half = 0.5, one = 1.0, c = SQRT_HALF
    for i in range(x.shape[0]):
        v = x[i]
        y[i] = half * v * (one + _erf(v * c))


cdef void _gelu_back(floating[::1] x, floating[::1] g, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v, cdf, pdf
    cdef floating half = 0.5, one = 1.0, c = SQRT_HALF, k = INV_SQRT_2PI
    for i in range(x.shape[0]):
        v = x[i]
        cdf = half * (one + _erf(v * c))
        pdf = k * _exp(-half * v * v)
        out[i] = g[i] * (cdf + v * pdf)


def gelu_forward(x):
    flat = np.ascontiguousarray(x).ravel()
    y = np.empty_like(flat)
    if flat.dtype == np.float32:
        _gelu[float](flat, y)
    else:
        _gelu[double](flat, y)
    return y.reshape(x.shape)


def gelu_backward(x, grad):
    flat = np.ascontiguousarray(x).ravel()
    g = np.ascontiguousarray(grad, dtype=flat.dtype).ravel()
    out = np.empty_like(flat)
    if flat.dtype == np.float32:
        _gelu_back[float](flat, g, out)
    else:
        _gelu_back[double](flat, g, out)
    return out.reshape(x.shape)


cdef void _patchify(floating[:, :, :, :, ::1] x, floating[:, :, ::1] out,
                    Py_ssize_t kt, Py_ssize_t ks) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, d, dt, i, j, p, f
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Tp = x.shape[2] // kt, Hp = x.shape[3] // ks, Wp = x.shape[4] // ks
    for n in range(N):
        for a in range(Tp):
            for b in range(Hp):
                for d in range(Wp):
                    p = (a * Hp + b) * Wp + d
                    f = 0
                    for c in range(C):
                        for dt in range(kt):
                            for i in range(ks):
                                for j in range(ks):
                                    out[n, p, f] = x[n, c, a * kt + dt, b * ks + i, d * ks + j]
                                    f += 1


cdef void _unpatchify(floating[:, :, ::1] cols, floating[:, :, :, :, ::1] out,
                      Py_ssize_t kt, Py_ssize_t ks) noexcept nogil:
    cdef Py_ssize_t n, c, a, b, d, dt, i, j, p, f
    cdef Py_ssize_t N = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t Tp = out.shape[2] // kt, Hp = out.shape[3] // ks, Wp = out.shape[4] // ks
    for n in range(N):
        for a in range(Tp):
            for b in range(Hp):
                for d in range(Wp):
                    p = (a * Hp + b) * Wp + d
                    f = 0
                    for c in range(C):
                        for dt in range(kt):
                            for i in range(ks):
                                for j in range(ks):
                                    out[n, c, a * kt + dt, b * ks + i, d * ks + j] = cols[n, p, f]
                                    f += 1


def patchify(x, kt, ks):
    x = np.ascontiguousarray(x)
    n, c, t, h, w = x.shape
    out = np.empty((n, (t // kt) * (h // ks) * (w // ks), c * kt * ks * ks), dtype=x.dtype)
    if x.dtype == np.float32:
        _patchify[float](x, out, kt, ks)
    else:
        _patchify[double](x, out, kt, ks)
    return out


def unpatchify(cols, c, t, h, w, kt, ks):
    cols = np.ascontiguousarray(cols)
    out = np.empty((cols.shape[0], c, t, h, w), dtype=cols.dtype)
    if cols.dtype == np.float32:
        _unpatchify[float](cols, out, kt, ks)
    else:
        _unpatchify[double](cols, out, kt, ks)
    return out
