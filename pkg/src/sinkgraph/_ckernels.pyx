# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: segment reductions and row gather/scatter.

All functions take C-contiguous float64 value arrays of shape [N, D] and
int64 index arrays. Accumulation is sequential in input order, matching the
numpy fallback bit for bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def segment_sum(const double[:, ::1] values, const long[::1] segments, Py_ssize_t num_segments):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.zeros((num_segments, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, s
    for i in range(n):
        s = segments[i]
        for j in range(d):
            out[s, j] += values[i, j]
    return out_arr


def segment_max(const double[:, ::1] values, const long[::1] segments, Py_ssize_t num_segments,
                double empty_value):
    cdef Py_ssize_t n = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.full((num_segments, d), empty_value, dtype=np.float64)
    arg_arr = np.full((num_segments, d), -1, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long[:, ::1] arg = arg_arr
    cdef Py_ssize_t i, j, s
    cdef double v
    for i in range(n):
        s = segments[i]
        for j in range(d):
            v = values[i, j]
            # strict > keeps the first attaining index on ties
            if arg[s, j] < 0 or v > out[s, j]:
                out[s, j] = v
                arg[s, j] = i
    return out_arr, arg_arr


def gather_rows(const double[:, ::1] values, const long[::1] index):
    cdef Py_ssize_t m = index.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r
    for i in range(m):
        r = index[i]
        for j in range(d):
            out[i, j] = values[r, j]
    return out_arr


def scatter_add_rows(const double[:, ::1] values, const long[::1] index, Py_ssize_t num_rows):
    cdef Py_ssize_t m = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.zeros((num_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, r
    for i in range(m):
        r = index[i]
        for j in range(d):
            out[r, j] += values[i, j]
    return out_arr


def scatter_rows_at(const double[:, ::1] values, const long[:, ::1] arg, Py_ssize_t num_rows):
    """Adjoint of segment_max: route values[s, j] to input row arg[s, j]."""
    cdef Py_ssize_t s_count = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    out_arr = np.zeros((num_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t s, j
    cdef long r
    for s in range(s_count):
        for j in range(d):
            r = arg[s, j]
            if r >= 0:
                out[r, j] += values[s, j]
    return out_arr
