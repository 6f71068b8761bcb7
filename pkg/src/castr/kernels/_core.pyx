# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels.

Signature-compatible with `castr.kernels.pure`; see that module for the
contracts. Row reductions accumulate in double regardless of the array
dtype, so float32 results can differ from the pure backend at the level of
float32 rounding (the parity tests budget for this).
"""

from libc.math cimport erf, erff, exp, expf, sqrt
from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double

NAME = "compiled"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def ln_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps,
           real[:, ::1] y, real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t M = x.shape[0], K = x.shape[1], i, j
    cdef double mu, var, d, r
    with nogil:
        for i in range(M):
            mu = 0.0
            for j in range(K):
                mu += x[i, j]
            mu /= K
            var = 0.0
            for j in range(K):
                d = x[i, j] - mu
                var += d * d
            var /= K
            r = 1.0 / sqrt(var + eps)
            mean[i] = <real> mu
            rstd[i] = <real> r
            for j in range(K):
                y[i, j] = <real> (((x[i, j] - mu) * r) * gamma[j] + beta[j])


def ln_bwd(real[:, ::1] dy, real[:, ::1] x, real[::1] gamma,
           real[::1] mean, real[::1] rstd,
           real[:, ::1] dx, real[::1] dgamma, real[::1] dbeta):
    cdef Py_ssize_t M = x.shape[0], K = x.shape[1], i, j
    cdef double m1, m2, dxh, xh, r
    cdef double *dg = <double *> malloc(K * sizeof(double))
    cdef double *db = <double *> malloc(K * sizeof(double))
    if dg == NULL or db == NULL:
        free(dg)
        free(db)
        raise MemoryError()
    try:
        with nogil:
            for j in range(K):
                dg[j] = 0.0
                db[j] = 0.0
            for i in range(M):
                r = rstd[i]
                m1 = 0.0
                m2 = 0.0
                for j in range(K):
                    xh = (x[i, j] - mean[i]) * r
                    dxh = dy[i, j] * gamma[j]
                    m1 += dxh
                    m2 += dxh * xh
                    dg[j] += dy[i, j] * xh
                    db[j] += dy[i, j]
                m1 /= K
                m2 /= K
                for j in range(K):
                    xh = (x[i, j] - mean[i]) * r
                    dxh = dy[i, j] * gamma[j]
                    dx[i, j] = <real> ((dxh - m1 - xh * m2) * r)
            for j in range(K):
                dgamma[j] = <real> dg[j]
                dbeta[j] = <real> db[j]
    finally:
        free(dg)
        free(db)


def gelu_fwd(real[::1] x, real[::1] y):
    cdef Py_ssize_t n = x.shape[0], i
    cdef float xf
    cdef double xd
    with nogil:
        if real is float:
            for i in range(n):
                xf = x[i]
                y[i] = <float> 0.5 * xf * (<float> 1.0 + erff(xf * <float> INV_SQRT2))
        else:
            for i in range(n):
                xd = x[i]
                y[i] = 0.5 * xd * (1.0 + erf(xd * INV_SQRT2))


def gelu_bwd(real[::1] x, real[::1] g, real[::1] dx):
    cdef Py_ssize_t n = x.shape[0], i
    cdef float xf, cdff, pdff
    cdef double xd, cdfd, pdfd
    with nogil:
        if real is float:
            for i in range(n):
                xf = x[i]
                cdff = <float> 0.5 * (<float> 1.0 + erff(xf * <float> INV_SQRT2))
                pdff = <float> INV_SQRT2PI * expf(<float> -0.5 * xf * xf)
                dx[i] = g[i] * (cdff + xf * pdff)
        else:
            for i in range(n):
                xd = x[i]
                cdfd = 0.5 * (1.0 + erf(xd * INV_SQRT2))
                pdfd = INV_SQRT2PI * exp(-0.5 * xd * xd)
                dx[i] = g[i] * (cdfd + xd * pdfd)


def softmax_fwd(real[:, ::1] x, real[:, ::1] y):
    cdef Py_ssize_t M = x.shape[0], N = x.shape[1], i, j
    cdef double s, inv
    cdef real m
    cdef float ef
    cdef double ed
    with nogil:
        for i in range(M):
            m = x[i, 0]
            for j in range(1, N):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            if real is float:
                for j in range(N):
                    ef = expf(x[i, j] - m)
                    y[i, j] = ef
                    s += ef
            else:
                for j in range(N):
                    ed = exp(x[i, j] - m)
                    y[i, j] = ed
                    s += ed
            inv = 1.0 / s
            for j in range(N):
                y[i, j] = <real> (y[i, j] * inv)


def softmax_bwd(real[:, ::1] y, real[:, ::1] g, real[:, ::1] dx):
    cdef Py_ssize_t M = y.shape[0], N = y.shape[1], i, j
    cdef double dot
    with nogil:
        for i in range(M):
            dot = 0.0
            for j in range(N):
                dot += y[i, j] * g[i, j]
            for j in range(N):
                dx[i, j] = <real> (y[i, j] * (g[i, j] - dot))


def adamw_step(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
               double lr, double beta1, double beta2, double eps,
               double wd, double c1, double c2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, mhat, vhat
    with nogil:
        for i in range(n):
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * (g[i] * g[i])
            m[i] = <real> mi
            v[i] = <real> vi
            mhat = mi / c1
            vhat = vi / c2
            p[i] = <real> (p[i] - lr * (mhat / (sqrt(vhat) + eps) + wd * p[i]))
