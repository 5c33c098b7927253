# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels.  Signatures match ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


def heavy_edge_matching(const int[::1] indptr, const int[::1] indices,
                        const double[::1] data, Py_ssize_t target):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef cnp.int64_t[::1] partner = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] labels = np.full(n, -1, dtype=np.int64)
    cdef Py_ssize_t count = n, u, p, v, best, nxt = 0
    cdef double best_w
    for u in range(n):
        if count <= target:
            break
        if partner[u] != -1:
            continue
        best = -1
        best_w = -INFINITY
        for p in range(indptr[u], indptr[u + 1]):
            v = indices[p]
            if v == u or partner[v] != -1:
                continue
            if data[p] > best_w:
                best_w = data[p]
                best = v
        if best != -1:
            partner[u] = best
            partner[best] = u
            count -= 1
    for u in range(n):
        if labels[u] != -1:
            continue
        labels[u] = nxt
        if partner[u] != -1:
            labels[partner[u]] = nxt
        nxt += 1
    return np.asarray(labels), nxt


cdef void _step(const int[::1] indptr, const int[::1] indices, const double[::1] data,
                double scale, double[:, ::1] prev, double[:, ::1] prev2,
                double[:, ::1] out, bint first) noexcept nogil:
    # out = 2 (scale L prev - prev) - prev2, or (scale L prev - prev) when first
    cdef Py_ssize_t n = prev.shape[0], p = prev.shape[1]
    cdef Py_ssize_t i, q, c
    cdef double a, acc
    for i in range(n):
        for c in range(p):
            acc = 0.0
            for q in range(indptr[i], indptr[i + 1]):
                acc = acc + data[q] * prev[indices[q], c]
            a = scale * acc - prev[i, c]
            if first:
                out[i, c] = a
            else:
                out[i, c] = 2.0 * a - prev2[i, c]


def cheb_recurrence(const int[::1] indptr, const int[::1] indices,
                    const double[::1] data, double scale, x, Py_ssize_t r):
    x = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1], j
    out_arr = np.empty((r, n, p))
    cdef double[:, :, ::1] out = out_arr
    out_arr[0] = x
    if r == 1:
        return out_arr
    with nogil:
        _step(indptr, indices, data, scale, out[0], out[0], out[1], True)
        for j in range(2, r):
            _step(indptr, indices, data, scale, out[j - 1], out[j - 2], out[j], False)
    return out_arr


def cotan_face_terms(lengths):
    cdef double[:, ::1] L = np.ascontiguousarray(lengths, dtype=np.float64)
    cdef Py_ssize_t m = L.shape[0], f, i
    areas_arr = np.zeros(m)
    terms_arr = np.empty((m, 3))
    cdef double[::1] areas = areas_arr
    cdef double[:, ::1] terms = terms_arr
    cdef double l0, l1, l2, s, prod, total, a
    cdef Py_ssize_t bad = -1
    for f in range(m):
        l0 = L[f, 0]
        l1 = L[f, 1]
        l2 = L[f, 2]
        s = 0.5 * (l0 + l1 + l2)
        prod = s * (s - l0) * (s - l1) * (s - l2)
        if s - l0 <= 0 or s - l1 <= 0 or s - l2 <= 0 or prod <= 0:
            if bad == -1:
                bad = f
            a = 0.0
        else:
            a = sqrt(prod)
        areas[f] = a
        total = l0 * l0 + l1 * l1 + l2 * l2
        for i in range(3):
            if a > 0:
                terms[f, i] = (total - 2.0 * L[f, i] * L[f, i]) / (8.0 * a)
            else:
                terms[f, i] = INFINITY
    return areas_arr, terms_arr, bad
