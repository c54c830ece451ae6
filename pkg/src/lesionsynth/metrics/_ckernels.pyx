# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled metric kernels.

Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher
lower envelope of parabolas, separable over the two axes), 4-connected
boundary extraction and confusion-matrix counting.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


cdef void _edt_1d(double* f, Py_ssize_t n, Py_ssize_t stride, double w2,
                  double* d, Py_ssize_t* v, double* z) noexcept nogil:
    """In-place 1-d transform of f[0], f[stride], ... with weight w2 = spacing**2."""
    cdef Py_ssize_t q, k = -1, p
    cdef double s, fq
    for q in range(n):
        fq = f[q * stride]
        if fq == INFINITY:
            continue
        while True:
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -INFINITY
                z[1] = INFINITY
                break
            p = v[k]
            s = ((fq + w2 * q * q) - (f[p * stride] + w2 * p * p)) / (2.0 * w2 * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            k += 1
            v[k] = q
            z[k] = s
            z[k + 1] = INFINITY
            break
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
    else:
        k = 0
        for q in range(n):
            while z[k + 1] < q:
                k += 1
            p = v[k]
            d[q] = w2 * (q - p) * (q - p) + f[p * stride]
    for q in range(n):
        f[q * stride] = d[q]


def edt_sq(features, double sy=1.0, double sx=1.0):
    """Squared distance from every pixel to the nearest nonzero pixel.

    Returns ``inf`` everywhere when ``features`` has no nonzero pixel.
    """
    cdef cnp.uint8_t[:, ::1] feat = np.ascontiguousarray(features, dtype=np.uint8)
    cdef Py_ssize_t h = feat.shape[0], w = feat.shape[1], i, j
    out_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m = max(h, w)
    cdef double[::1] d = np.empty(m, dtype=np.float64)
    cdef double[::1] z = np.empty(m + 1, dtype=np.float64)
    cdef Py_ssize_t[::1] v = np.empty(m, dtype=np.intp)
    if h == 0 or w == 0:
        return out_arr
    with nogil:
        for i in range(h):
            for j in range(w):
                out[i, j] = 0.0 if feat[i, j] else INFINITY
        for j in range(w):
            _edt_1d(&out[0, j], h, w, sy * sy, &d[0], &v[0], &z[0])
        for i in range(h):
            _edt_1d(&out[i, 0], w, 1, sx * sx, &d[0], &v[0], &z[0])
    return out_arr


def boundary_mask(mask):
    """Foreground pixels with a background 4-neighbour; the border counts as background."""
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(np.asarray(mask) != 0).view(np.uint8)
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1], i, j
    out_arr = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] out = out_arr
    if h == 0 or w == 0:
        return out_arr
    with nogil:
        # interior: branch-free so the inner loop vectorises
        for i in range(1, h - 1):
            for j in range(1, w - 1):
                out[i, j] = m[i, j] & ~(m[i - 1, j] & m[i + 1, j] & m[i, j - 1] & m[i, j + 1]) & 1
        for j in range(w):
            out[0, j] = m[0, j]
            out[h - 1, j] = m[h - 1, j]
        for i in range(h):
            out[i, 0] = m[i, 0]
            out[i, w - 1] = m[i, w - 1]
    return out_arr


def confusion_counts(truth, pred, Py_ssize_t k):
    cdef cnp.int64_t[::1] t = np.ascontiguousarray(truth, dtype=np.int64)
    cdef cnp.int64_t[::1] p = np.ascontiguousarray(pred, dtype=np.int64)
    if t.shape[0] != p.shape[0]:
        raise ValueError("truth and pred lengths differ")
    out_arr = np.zeros((k, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    cdef Py_ssize_t i, n = t.shape[0]
    for i in range(n):
        if t[i] < 0 or t[i] >= k or p[i] < 0 or p[i] >= k:
            raise ValueError(f"label out of range [0, {k}) at position {i}")
        out[t[i], p[i]] += 1
    return out_arr
