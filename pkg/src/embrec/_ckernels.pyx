# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernels for the transformer hot path.

Same contract as the numpy twin in ``_kernels_np.py``: float64 in, float64
out, identical shapes. Loops are fused per attention row to avoid the
temporary arrays the numpy path allocates.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt

cnp.import_array()

BACKEND_NAME = "cython"

RMS_EPS = 1e-6

cdef double _INV_SQRT2 = 1.0 / sqrt(2.0)
cdef double _INV_SQRT_2PI = 1.0 / sqrt(2.0 * 3.141592653589793)
cdef double _RMS_EPS = 1e-6


def gelu_fwd(object x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double xi
    for i in range(n):
        xi = xv[i]
        ov[i] = 0.5 * xi * (1.0 + erf(xi * _INV_SQRT2))
    return out


def gelu_bwd(object x, object dy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] dv = dy.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double xi, cdf, pdf
    for i in range(n):
        xi = xv[i]
        cdf = 0.5 * (1.0 + erf(xi * _INV_SQRT2))
        pdf = exp(-0.5 * xi * xi) * _INV_SQRT_2PI
        ov[i] = dv[i] * (cdf + xi * pdf)
    return out


def rmsnorm_fwd(object x, object gain):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    cdef Py_ssize_t L = x.shape[0], d = x.shape[1]
    y = np.empty_like(x)
    inv_rms = np.empty(L, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] yv = y
    cdef double[::1] gv = gain
    cdef double[::1] rv = inv_rms
    cdef Py_ssize_t i, j
    cdef double s, r
    for i in range(L):
        s = 0.0
        for j in range(d):
            s += xv[i, j] * xv[i, j]
        r = 1.0 / sqrt(s / d + _RMS_EPS)
        rv[i] = r
        for j in range(d):
            yv[i, j] = xv[i, j] * r * gv[j]
    return y, inv_rms


def rmsnorm_bwd(object x, object gain, object inv_rms, object dy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    inv_rms = np.ascontiguousarray(inv_rms, dtype=np.float64)
    dy = np.ascontiguousarray(dy, dtype=np.float64)
    cdef Py_ssize_t L = x.shape[0], d = x.shape[1]
    dx = np.empty_like(x)
    dgain = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] dyv = dy
    cdef double[:, ::1] dxv = dx
    cdef double[::1] gv = gain
    cdef double[::1] rv = inv_rms
    cdef double[::1] dgv = dgain
    cdef Py_ssize_t i, j
    cdef double r, r3, t
    for i in range(L):
        r = rv[i]
        r3 = r * r * r
        t = 0.0
        for j in range(d):
            dgv[j] += dyv[i, j] * xv[i, j] * r
            t += dyv[i, j] * gv[j] * xv[i, j]
        t /= d
        for j in range(d):
            dxv[i, j] = dyv[i, j] * gv[j] * r - xv[i, j] * r3 * t
    return dx, dgain


def causal_attention_fwd(object q, object k, object v):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t H = q.shape[0], L = q.shape[1], dh = q.shape[2]
    ctx = np.zeros((H, L, dh), dtype=np.float64)
    attn = np.zeros((H, L, L), dtype=np.float64)
    cdef double[:, :, ::1] qv = q
    cdef double[:, :, ::1] kv = k
    cdef double[:, :, ::1] vv = v
    cdef double[:, :, ::1] cv = ctx
    cdef double[:, :, ::1] av = attn
    cdef double scale = 1.0 / sqrt(<double> dh)
    cdef Py_ssize_t h, i, j, c
    cdef double s, m, tot, w
    for h in range(H):
        for i in range(L):
            m = -1e300
            for j in range(i + 1):
                s = 0.0
                for c in range(dh):
                    s += qv[h, i, c] * kv[h, j, c]
                s *= scale
                av[h, i, j] = s
                if s > m:
                    m = s
            tot = 0.0
            for j in range(i + 1):
                w = exp(av[h, i, j] - m)
                av[h, i, j] = w
                tot += w
            for j in range(i + 1):
                w = av[h, i, j] / tot
                av[h, i, j] = w
                for c in range(dh):
                    cv[h, i, c] += w * vv[h, j, c]
    return ctx, attn


def causal_attention_bwd(object q, object k, object v, object attn, object dctx):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    attn = np.ascontiguousarray(attn, dtype=np.float64)
    dctx = np.ascontiguousarray(dctx, dtype=np.float64)
    cdef Py_ssize_t H = q.shape[0], L = q.shape[1], dh = q.shape[2]
    dq = np.zeros((H, L, dh), dtype=np.float64)
    dk = np.zeros((H, L, dh), dtype=np.float64)
    dv = np.zeros((H, L, dh), dtype=np.float64)
    cdef double[:, :, ::1] qv = q
    cdef double[:, :, ::1] kv = k
    cdef double[:, :, ::1] vv = v
    cdef double[:, :, ::1] av = attn
    cdef double[:, :, ::1] dcv = dctx
    cdef double[:, :, ::1] dqv = dq
    cdef double[:, :, ::1] dkv = dk
    cdef double[:, :, ::1] dvv = dv
    cdef double scale = 1.0 / sqrt(<double> dh)
    cdef Py_ssize_t h, i, j, c
    cdef double t, da, ds
    # row-local scratch for dattn
    drow = np.zeros(L, dtype=np.float64)
    cdef double[::1] dr = drow
    for h in range(H):
        for i in range(L):
            t = 0.0
            for j in range(i + 1):
                da = 0.0
                for c in range(dh):
                    da += dcv[h, i, c] * vv[h, j, c]
                dr[j] = da
                t += da * av[h, i, j]
            for j in range(i + 1):
                ds = av[h, i, j] * (dr[j] - t)
                for c in range(dh):
                    dvv[h, j, c] += av[h, i, j] * dcv[h, i, c]
                    dqv[h, i, c] += ds * kv[h, j, c] * scale
                    dkv[h, j, c] += ds * qv[h, i, c] * scale
    return dq, dk, dv
