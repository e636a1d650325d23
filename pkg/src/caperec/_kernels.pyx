# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for embedding scatter-add and position-logit interpolation.

Same contracts as ``_kernels_py``; see that module for argument shapes.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def scatter_add_rows(double[:, ::1] out, const long long[::1] ids, const double[:, ::1] src):
    cdef Py_ssize_t i, k, row
    cdef Py_ssize_t n = ids.shape[0], d = src.shape[1], v = out.shape[0]
    for i in range(n):
        row = ids[i]
        if row < 0 or row >= v:
            raise IndexError(f"id {row} out of range for {v} rows")
        for k in range(d):
            out[row, k] += src[i, k]


cdef inline Py_ssize_t _floor_index(double pj) nogil:
    # nan maps to 0 so the lookup stays in bounds; the weight keeps the nan
    if pj != pj:
        return 0
    return <Py_ssize_t>floor(pj)


def interp_gather(const double[:, ::1] z, const double[:, ::1] p):
    cdef Py_ssize_t rows = p.shape[0], n = p.shape[1], width = z.shape[1]
    out_arr = np.empty((rows, n))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, j, lo, hi
    cdef double w, pj
    for r in range(rows):
        for j in range(n):
            pj = p[r, j]
            lo = _floor_index(pj)
            hi = lo + 1
            if hi > width - 1:
                hi = width - 1
            w = pj - <double>lo
            out[r, j] = w * z[r, hi] + (1.0 - w) * z[r, lo]
    return out_arr


def interp_scatter(const double[:, ::1] z, const double[:, ::1] p, const double[:, ::1] gout):
    cdef Py_ssize_t rows = p.shape[0], n = p.shape[1], width = z.shape[1]
    gz_arr = np.zeros((rows, width))
    gp_arr = np.empty((rows, n))
    cdef double[:, ::1] gz = gz_arr
    cdef double[:, ::1] gp = gp_arr
    cdef Py_ssize_t r, j, lo, hi
    cdef double w, pj, g
    # all floor contributions first, then all ceil ones: matches the numpy path's
    # accumulation order so both backends agree bitwise
    for r in range(rows):
        for j in range(n):
            pj = p[r, j]
            lo = _floor_index(pj)
            w = pj - <double>lo
            hi = lo + 1
            if hi > width - 1:
                hi = width - 1
            g = gout[r, j]
            gp[r, j] = (z[r, hi] - z[r, lo]) * g
    for r in range(rows):
        for j in range(n):
            pj = p[r, j]
            lo = _floor_index(pj)
            w = pj - <double>lo
            gz[r, lo] += (1.0 - w) * gout[r, j]
    for r in range(rows):
        for j in range(n):
            pj = p[r, j]
            lo = _floor_index(pj)
            w = pj - <double>lo
            hi = lo + 1
            if hi > width - 1:
                hi = width - 1
            gz[r, hi] += w * gout[r, j]
    return gz_arr, gp_arr
