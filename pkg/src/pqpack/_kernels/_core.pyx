# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.

``fc_forward`` and ``kmeans_assign`` follow the pinned accumulation
contract shared with the pure-numpy fallback (float64 accumulators,
ascending contracted index, single final cast), so the two backends
produce identical bits.  Backward kernels live in the fallback module:
they have no ordering contract and BLAS is faster than explicit loops.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

ctypedef fused floating:
    float
    double


def fc_forward(const floating[:, ::1] x, const floating[:, ::1] w):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = x.shape[1]
    cdef Py_ssize_t j = w.shape[1]
    cdef Py_ssize_t i, kk, jj
    cdef double xv
    out_arr = np.empty((n, j), dtype=np.float32 if floating is float else np.float64)
    cdef floating[:, ::1] out = out_arr
    acc_arr = np.empty(j, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    for i in range(n):
        for jj in range(j):
            acc[jj] = 0.0
        for kk in range(k):
            xv = <double> x[i, kk]
            for jj in range(j):
                acc[jj] += xv * <double> w[kk, jj]
        for jj in range(j):
            out[i, jj] = <floating> acc[jj]
    return out_arr


def kmeans_assign(const floating[:, ::1] points, const floating[:, ::1] centroids):
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t d = points.shape[1]
    cdef Py_ssize_t k = centroids.shape[0]
    cdef Py_ssize_t i, c, dd
    cdef double dist, diff, best
    cdef int best_c
    codes_arr = np.empty(n, dtype=np.int32)
    dists_arr = np.empty(n, dtype=np.float64)
    cdef int[::1] codes = codes_arr
    cdef double[::1] dists = dists_arr
    for i in range(n):
        best = np.inf
        best_c = 0
        for c in range(k):
            dist = 0.0
            for dd in range(d):
                diff = <double> points[i, dd] - <double> centroids[c, dd]
                dist += diff * diff
            if dist < best:
                best = dist
                best_c = c
        codes[i] = best_c
        dists[i] = best
    return codes_arr, dists_arr
