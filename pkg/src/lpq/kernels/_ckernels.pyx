# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Semantics mirror lpq.kernels._pykernels exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, copysign, isnan, isinf

cnp.import_array()

NAME = "cython"

cdef double HALF_MAX = 65504.0


cdef union dbits:
    double d
    unsigned long long u


cdef inline double round_half_c(double v) noexcept nogil:
    # (a + C) - C with C = 2^(e+42) rounds a to the half grid of its binade
    # (quantum 2^(e-10), floor 2^-24) under the default round-to-nearest-even mode
    cdef double a, q
    cdef dbits b, c
    cdef long long e
    if isnan(v):
        return v
    a = fabs(v)
    if isinf(a):
        return copysign(HALF_MAX, v)
    b.d = a
    e = <long long>((b.u >> 52) & 0x7FF) - 1023
    if e < -14:
        e = -14
    c.u = (<unsigned long long>(e + 42 + 1023)) << 52
    q = (a + c.d) - c.d
    if q > HALF_MAX:
        q = HALF_MAX
    return copysign(q, v)


def round_half(v):
    cdef double[::1] src = np.ascontiguousarray(v, dtype=np.float64).ravel()
    out = np.empty(src.shape[0], dtype=np.float64)
    cdef double[::1] dst = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(src.shape[0]):
            dst[i] = round_half_c(src[i])
    return out.reshape(np.shape(v))


def matmul_fp32(x, w):
    cdef float[:, ::1] X = np.ascontiguousarray(x, dtype=np.float32)
    cdef float[:, ::1] W = np.ascontiguousarray(w, dtype=np.float32)
    cdef Py_ssize_t m = X.shape[0], n = X.shape[1], k = W.shape[1]
    out = np.zeros((m, k), dtype=np.float32)
    cdef float[:, ::1] Y = out
    cdef Py_ssize_t i, t, j
    cdef float xv
    with nogil:
        for i in range(m):
            for t in range(n):
                xv = X[i, t]
                for j in range(k):
                    Y[i, j] = Y[i, j] + xv * W[t, j]
    return out


def matmul_fp16(xh, wh, bint accum16):
    cdef double[:, ::1] X = np.ascontiguousarray(xh, dtype=np.float64)
    cdef double[:, ::1] W = np.ascontiguousarray(wh, dtype=np.float64)
    cdef Py_ssize_t m = X.shape[0], n = X.shape[1], k = W.shape[1]
    cdef Py_ssize_t i, t, j
    cdef double xv
    acc64 = np.zeros(k, dtype=np.float64)
    acc32 = np.zeros(k, dtype=np.float32)
    cdef double[::1] A = acc64
    cdef float[::1] B = acc32
    out = np.empty((m, k), dtype=np.float32)
    cdef float[:, ::1] Y = out
    with nogil:
        for i in range(m):
            for j in range(k):
                A[j] = 0.0
                B[j] = 0.0
            for t in range(n):
                xv = X[i, t]
                if accum16:
                    for j in range(k):
                        A[j] = round_half_c(A[j] + round_half_c(xv * W[t, j]))
                else:
                    for j in range(k):
                        B[j] = B[j] + <float>round_half_c(xv * W[t, j])
            for j in range(k):
                Y[i, j] = <float>A[j] if accum16 else B[j]
    return out


def bmm_fp32(a, c):
    cdef float[:, :, ::1] A = np.ascontiguousarray(a, dtype=np.float32)
    cdef float[:, :, ::1] C = np.ascontiguousarray(c, dtype=np.float32)
    cdef Py_ssize_t nb = A.shape[0], p = A.shape[1], q = A.shape[2], r = C.shape[2]
    out = np.zeros((nb, p, r), dtype=np.float32)
    cdef float[:, :, ::1] Y = out
    cdef Py_ssize_t b, i, t, j
    cdef float av
    with nogil:
        for b in range(nb):
            for i in range(p):
                for t in range(q):
                    av = A[b, i, t]
                    for j in range(r):
                        Y[b, i, j] = Y[b, i, j] + av * C[b, t, j]
    return out


def bmm_fp16(ah, ch, bint accum16):
    a = np.ascontiguousarray(ah, dtype=np.float64)
    c = np.ascontiguousarray(ch, dtype=np.float64)
    out = np.empty((a.shape[0], a.shape[1], c.shape[2]), dtype=np.float32)
    for b in range(a.shape[0]):
        out[b] = matmul_fp16(a[b], c[b], accum16)
    return out


def sls_fp32(table, offsets, ids, bint accum16):
    cdef float[:, ::1] T = np.ascontiguousarray(table, dtype=np.float32)
    cdef long long[::1] O = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef long long[::1] I = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t m = O.shape[0] - 1, d = T.shape[1]
    out = np.zeros((m, d), dtype=np.float32)
    cdef float[:, ::1] Y = out
    acc64 = np.zeros(d, dtype=np.float64)
    cdef double[::1] A = acc64
    cdef Py_ssize_t s, p, j
    cdef long long r
    with nogil:
        for s in range(m):
            for j in range(d):
                A[j] = 0.0
            for p in range(O[s], O[s + 1]):
                r = I[p]
                if accum16:
                    for j in range(d):
                        A[j] = round_half_c(A[j] + round_half_c(T[r, j]))
                else:
                    for j in range(d):
                        Y[s, j] = Y[s, j] + T[r, j]
            if accum16:
                for j in range(d):
                    Y[s, j] = <float>A[j]
    return out


def sls_rowwise(codes, scales, biases, Py_ssize_t dim, int bits, offsets, ids, bint accum16):
    cdef unsigned char[:, ::1] Q = np.ascontiguousarray(codes, dtype=np.uint8)
    cdef float[::1] S = np.ascontiguousarray(scales, dtype=np.float32)
    cdef float[::1] Bi = np.ascontiguousarray(biases, dtype=np.float32)
    cdef long long[::1] O = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef long long[::1] I = np.ascontiguousarray(ids, dtype=np.int64)
    cdef Py_ssize_t m = O.shape[0] - 1
    out = np.zeros((m, dim), dtype=np.float32)
    cdef float[:, ::1] Y = out
    acc64 = np.zeros(dim, dtype=np.float64)
    cdef double[::1] A = acc64
    cdef Py_ssize_t s, p, j
    cdef long long r
    cdef unsigned char c
    cdef float sc, bi, val
    with nogil:
        for s in range(m):
            for j in range(dim):
                A[j] = 0.0
            for p in range(O[s], O[s + 1]):
                r = I[p]
                sc = S[r]
                bi = Bi[r]
                for j in range(dim):
                    if bits == 4:
                        c = Q[r, j >> 1]
                        c = (c >> 4) if (j & 1) else (c & 0x0F)
                    else:
                        c = Q[r, j]
                    val = <float>(<double>sc * <double>c + <double>bi)
                    if accum16:
                        A[j] = round_half_c(A[j] + round_half_c(val))
                    else:
                        Y[s, j] = Y[s, j] + val
            if accum16:
                for j in range(dim):
                    Y[s, j] = <float>A[j]
    return out
