# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: fixed-order matmul and softmax row normalization.

Every output element accumulates over the contraction axis strictly left to
right, matching :mod:`tokencompress._fallback` bit for bit.
"""

ctypedef fused real:
    float
    double


def matmul2d(const real[:, ::1] a, const real[:, ::1] b, real[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1], p = b.shape[1]
    cdef Py_ssize_t i, j, t
    cdef real av
    for i in range(m):
        for j in range(p):
            out[i, j] = 0
        for t in range(n):
            av = a[i, t]
            for j in range(p):
                out[i, j] = out[i, j] + av * b[t, j]


def matmul3d(const real[:, :, ::1] a, const real[:, :, ::1] b, real[:, :, ::1] out):
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], n = a.shape[2], p = b.shape[2]
    cdef Py_ssize_t s, i, j, t
    cdef real av
    for s in range(nb):
        for i in range(m):
            for j in range(p):
                out[s, i, j] = 0
            for t in range(n):
                av = a[s, i, t]
                for j in range(p):
                    out[s, i, j] = out[s, i, j] + av * b[s, t, j]


def normalize_rows(real[:, ::1] e):
    """Divide each row of ``e`` in place by its left-to-right sum."""
    cdef Py_ssize_t m = e.shape[0], n = e.shape[1]
    cdef Py_ssize_t i, j
    cdef real total
    for i in range(m):
        total = 0
        for j in range(n):
            total = total + e[i, j]
        for j in range(n):
            e[i, j] = e[i, j] / total
