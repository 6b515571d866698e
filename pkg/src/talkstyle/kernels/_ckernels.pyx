# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# wraparound is off: never index with negative numbers in this file.
"""Compiled versions of the hot kernels (same signatures as ``_pykernels``).

Loops are written for the decoder's shapes: a handful of query rows per call
against up to a few hundred keys, 64-wide features.
"""
import numpy as np
from libc.math cimport exp, sqrt, INFINITY, isfinite


def layer_norm_forward(x, gamma, beta, double eps):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64).reshape(-1, x.shape[x.ndim - 1])
    cdef double[::1] g = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef double[::1] b = np.ascontiguousarray(beta, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1], i, j
    y = np.empty((n, d))
    xh = np.empty((n, d))
    rs = np.empty((n, 1))
    cdef double[:, ::1] Y = y
    cdef double[:, ::1] XH = xh
    cdef double[:, ::1] RS = rs
    cdef double mu, var, r, c
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += X[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = X[i, j] - mu
            var += c * c
        r = 1.0 / sqrt(var / d + eps)
        RS[i, 0] = r
        for j in range(d):
            c = (X[i, j] - mu) * r
            XH[i, j] = c
            Y[i, j] = c * g[j] + b[j]
    shape = x.shape
    return y.reshape(shape), xh.reshape(shape), rs.reshape(shape[: x.ndim - 1] + (1,))


def layer_norm_backward(gr, xhat, rstd, gamma):
    cdef Py_ssize_t d = xhat.shape[xhat.ndim - 1]
    cdef double[:, ::1] G = np.ascontiguousarray(gr, dtype=np.float64).reshape(-1, d)
    cdef double[:, ::1] XH = np.ascontiguousarray(xhat, dtype=np.float64).reshape(-1, d)
    cdef double[::1] RS = np.ascontiguousarray(rstd, dtype=np.float64).reshape(-1)
    cdef double[::1] gm = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef Py_ssize_t n = G.shape[0], i, j
    dx = np.empty((n, d))
    dg = np.zeros(d)
    db = np.zeros(d)
    cdef double[:, ::1] DX = dx
    cdef double[::1] DG = dg
    cdef double[::1] DB = db
    cdef double s1, s2, t
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            t = G[i, j] * gm[j]
            s1 += t
            s2 += t * XH[i, j]
            DG[j] += G[i, j] * XH[i, j]
            DB[j] += G[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            DX[i, j] = RS[i] * (G[i, j] * gm[j] - s1 - XH[i, j] * s2)
    return dx.reshape(xhat.shape), dg, db


def attention_forward(q, k, v, bias, int n_heads, double scale):
    cdef double[:, :] Q = np.asarray(q, dtype=np.float64)
    cdef double[:, :] K = np.asarray(k, dtype=np.float64)
    cdef double[:, :] V = np.asarray(v, dtype=np.float64)
    cdef Py_ssize_t n = Q.shape[0], m = K.shape[0]
    cdef Py_ssize_t dk = Q.shape[1] // n_heads, dv = V.shape[1] // n_heads
    cdef bint has_bias = bias is not None
    cdef double[:, :] B
    if has_bias:
        B = np.asarray(bias, dtype=np.float64)
    out = np.zeros((n, n_heads * dv))
    pr = np.empty((n_heads, n, m))
    cdef double[:, ::1] O = out
    cdef double[:, :, ::1] P = pr
    cdef Py_ssize_t h, i, j, c, qo, vo
    cdef double s, peak, tot, w
    for h in range(n_heads):
        qo = h * dk
        vo = h * dv
        for i in range(n):
            peak = -INFINITY
            for j in range(m):
                if has_bias and B[i, j] == -INFINITY:
                    P[h, i, j] = -INFINITY
                    continue
                s = 0.0
                for c in range(dk):
                    s += Q[i, qo + c] * K[j, qo + c]
                s *= scale
                if has_bias:
                    s += B[i, j]
                P[h, i, j] = s
                if s > peak:
                    peak = s
            if not isfinite(peak):
                raise FloatingPointError("degenerate attention row: every key is masked")
            tot = 0.0
            for j in range(m):
                w = exp(P[h, i, j] - peak)
                P[h, i, j] = w
                tot += w
            for j in range(m):
                w = P[h, i, j] / tot
                P[h, i, j] = w
                if w != 0.0:
                    for c in range(dv):
                        O[i, vo + c] += w * V[j, vo + c]
    return out, pr


def attention_backward(g, q, k, v, p, int n_heads, double scale):
    cdef double[:, :] G = np.asarray(g, dtype=np.float64)
    cdef double[:, :] Q = np.asarray(q, dtype=np.float64)
    cdef double[:, :] K = np.asarray(k, dtype=np.float64)
    cdef double[:, :] V = np.asarray(v, dtype=np.float64)
    cdef double[:, :, :] P = np.asarray(p, dtype=np.float64)
    cdef Py_ssize_t n = Q.shape[0], m = K.shape[0]
    cdef Py_ssize_t dk = Q.shape[1] // n_heads, dv = V.shape[1] // n_heads
    dq = np.zeros((n, n_heads * dk))
    dkk = np.zeros((m, n_heads * dk))
    dvv = np.zeros((m, n_heads * dv))
    cdef double[:, ::1] DQ = dq
    cdef double[:, ::1] DK = dkk
    cdef double[:, ::1] DV = dvv
    dp_buf = np.empty(m)
    cdef double[::1] DP = dp_buf
    cdef Py_ssize_t h, i, j, c, qo, vo
    cdef double s, dot, w, ds
    for h in range(n_heads):
        qo = h * dk
        vo = h * dv
        for i in range(n):
            dot = 0.0
            for j in range(m):
                w = P[h, i, j]
                if w == 0.0:
                    DP[j] = 0.0
                    continue
                s = 0.0
                for c in range(dv):
                    s += G[i, vo + c] * V[j, vo + c]
                    DV[j, vo + c] += w * G[i, vo + c]
                DP[j] = s
                dot += s * w
            for j in range(m):
                w = P[h, i, j]
                if w == 0.0:
                    continue
                ds = w * (DP[j] - dot) * scale
                for c in range(dk):
                    DQ[i, qo + c] += ds * K[j, qo + c]
                    DK[j, qo + c] += ds * Q[i, qo + c]
    return dq, dkk, dvv


def dtw_accumulate(cost):
    cdef double[:, :] C = np.asarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    acc_a = np.full((n, m), np.inf)
    len_a = np.zeros((n, m), dtype=np.int64)
    cdef double[:, ::1] A = acc_a
    cdef long long[:, ::1] L = len_a
    cdef double best, a
    cdef long long blen, ln
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                A[0, 0] = C[0, 0]
                L[0, 0] = 1
                continue
            best = INFINITY
            blen = 0
            if i > 0 and j > 0:
                best = A[i - 1, j - 1]
                blen = L[i - 1, j - 1]
            if i > 0:
                a = A[i - 1, j]
                ln = L[i - 1, j]
                if a < best or (a == best and ln < blen) or blen == 0:
                    best = a
                    blen = ln
            if j > 0:
                a = A[i, j - 1]
                ln = L[i, j - 1]
                if a < best or (a == best and ln < blen) or blen == 0:
                    best = a
                    blen = ln
            A[i, j] = C[i, j] + best
            L[i, j] = blen + 1
    return float(A[n - 1, m - 1]), int(L[n - 1, m - 1])
