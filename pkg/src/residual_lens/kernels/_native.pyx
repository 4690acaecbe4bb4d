# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: brute-force two-nearest-neighbour search and greedy matching."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def two_nearest(x):
    cdef double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    if n < 3:
        raise ValueError("need at least 3 points")
    r1_arr = np.empty(n)
    r2_arr = np.empty(n)
    cdef double[::1] r1 = r1_arr
    cdef double[::1] r2 = r2_arr
    cdef Py_ssize_t i, j, k
    cdef double best1, best2, acc, diff
    with nogil:
        for i in range(n):
            r1[i] = INFINITY
            r2[i] = INFINITY
        # symmetric: each pair visited once, both endpoints updated
        for i in range(n):
            best1 = r1[i]
            best2 = r2[i]
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    diff = X[i, k] - X[j, k]
                    acc = acc + diff * diff
                if acc < best2:
                    if acc < best1:
                        best2 = best1
                        best1 = acc
                    else:
                        best2 = acc
                if acc < r2[j]:
                    if acc < r1[j]:
                        r2[j] = r1[j]
                        r1[j] = acc
                    else:
                        r2[j] = acc
            r1[i] = best1
            r2[i] = best2
        for i in range(n):
            r1[i] = sqrt(r1[i])
            r2[i] = sqrt(r2[i])
    return r1_arr, r2_arr


def greedy_match(score):
    # Walking the entries once in descending order (stable, so ties keep
    # row-major order) and taking each one whose row and column are free is
    # the same as repeatedly taking the argmax of the remaining submatrix.
    S = np.ascontiguousarray(score, dtype=np.float64)
    cdef Py_ssize_t k1 = S.shape[0], k2 = S.shape[1]
    cdef Py_ssize_t m = k1 if k1 < k2 else k2
    cdef long long[::1] order = np.argsort(-S.ravel(), kind="stable").astype(np.int64)
    rows_arr = np.empty(m, dtype=np.int64)
    cols_arr = np.empty(m, dtype=np.int64)
    cdef long long[::1] rows = rows_arr
    cdef long long[::1] cols = cols_arr
    used_r_arr = np.zeros(k1, dtype=np.uint8)
    used_c_arr = np.zeros(k2, dtype=np.uint8)
    cdef unsigned char[::1] used_r = used_r_arr
    cdef unsigned char[::1] used_c = used_c_arr
    cdef Py_ssize_t t, n = 0, i, j, total = order.shape[0]
    with nogil:
        for t in range(total):
            if n == m:
                break
            i = order[t] // k2
            j = order[t] % k2
            if used_r[i] or used_c[j]:
                continue
            rows[n] = i
            cols[n] = j
            used_r[i] = 1
            used_c[j] = 1
            n += 1
    return rows_arr, cols_arr
