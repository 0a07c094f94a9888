# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: soft-DTW recursion, soft alignment
back-recursion, hard backtracking, variable-segment pooling and the fused
Adam update.

Signatures and semantics mirror ``somtp._fallback`` exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY, isinf

cnp.import_array()


cdef inline double _softmin2(double a, double b, double gamma) nogil:
    cdef double m
    if gamma == 0.0:
        return a if a < b else b
    m = a if a < b else b
    if isinf(m) and m > 0:
        return INFINITY
    return m - gamma * log(exp(-(a - m) / gamma) + exp(-(b - m) / gamma))


def softdtw_forward_batch(const double[:, :, ::1] D, double gamma):
    cdef Py_ssize_t B = D.shape[0], L = D.shape[1], T = D.shape[2]
    cdef Py_ssize_t b, l, t
    R_arr = np.full((B, L + 2, T + 2), np.inf)
    cdef double[:, :, ::1] R = R_arr
    with nogil:
        for b in range(B):
            R[b, 0, 0] = 0.0
            for l in range(1, L + 1):
                for t in range(1, T + 1):
                    R[b, l, t] = D[b, l - 1, t - 1] + _softmin2(R[b, l - 1, t - 1], R[b, l, t - 1], gamma)
    return R_arr


def softdtw_backward_batch(const double[:, :, ::1] D, const double[:, :, ::1] R_in, double gamma):
    cdef Py_ssize_t B = D.shape[0], L = D.shape[1], T = D.shape[2]
    cdef Py_ssize_t b, l, t
    cdef double a, c, r, d_right, d_diag
    E_arr = np.zeros((B, L + 2, T + 2))
    R_arr = np.array(R_in, copy=True)
    cdef double[:, :, ::1] E = E_arr
    cdef double[:, :, ::1] R = R_arr
    with nogil:
        for b in range(B):
            for l in range(L + 2):
                R[b, l, T + 1] = -INFINITY
            for t in range(T + 2):
                R[b, L + 1, t] = -INFINITY
            R[b, L + 1, T + 1] = R[b, L, T]
            E[b, L + 1, T + 1] = 1.0
            for l in range(L, 0, -1):
                for t in range(T, 0, -1):
                    r = R[b, l, t]
                    if isinf(r) and r > 0:
                        E[b, l, t] = 0.0
                        continue
                    d_right = D[b, l - 1, t] if t < T else 0.0
                    d_diag = D[b, l, t] if (l < L and t < T) else 0.0
                    a = exp((R[b, l, t + 1] - r - d_right) / gamma)
                    c = exp((R[b, l + 1, t + 1] - r - d_diag) / gamma)
                    E[b, l, t] = a * E[b, l, t + 1] + c * E[b, l + 1, t + 1]
    return E_arr


def backtrack_batch(const double[:, :, ::1] R, Py_ssize_t L, Py_ssize_t T):
    cdef Py_ssize_t B = R.shape[0]
    cdef Py_ssize_t b, l, t
    lengths_arr = np.zeros((B, L), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] lengths = lengths_arr
    with nogil:
        for b in range(B):
            l = L
            t = T
            while t >= 1:
                lengths[b, l - 1] += 1
                if t == 1:
                    break
                # ties go to the diagonal predecessor
                if R[b, l - 1, t - 1] <= R[b, l, t - 1]:
                    l -= 1
                t -= 1
    return lengths_arr


def segment_pool_batch(const double[:, :, ::1] H, const cnp.int64_t[:, ::1] bounds, bint use_max):
    cdef Py_ssize_t B = H.shape[0], K = H.shape[1]
    cdef Py_ssize_t n = bounds.shape[1] - 1
    cdef Py_ssize_t b, k, s, i, lo, hi, best
    cdef double acc, v
    out_arr = np.zeros((B, K, n))
    arg_arr = np.full((B, K, n), -1, dtype=np.int64)
    cdef double[:, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, ::1] arg = arg_arr
    with nogil:
        for b in range(B):
            for s in range(n):
                lo = bounds[b, s]
                hi = bounds[b, s + 1]
                for k in range(K):
                    if use_max:
                        best = lo
                        acc = H[b, k, lo]
                        for i in range(lo + 1, hi):
                            v = H[b, k, i]
                            if v > acc:
                                acc = v
                                best = i
                        out[b, k, s] = acc
                        arg[b, k, s] = best
                    else:
                        acc = 0.0
                        for i in range(lo, hi):
                            acc = acc + H[b, k, i]
                        out[b, k, s] = acc / (hi - lo)
    return out_arr, arg_arr


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, double c1, double c2):
    cdef Py_ssize_t i, N = p.shape[0]
    cdef double gi, step = lr / c1, inv_sqrt_c2 = 1.0 / sqrt(c2)
    with nogil:
        for i in range(N):
            gi = g[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
            p[i] -= step * m[i] / (sqrt(v[i]) * inv_sqrt_c2 + eps)
