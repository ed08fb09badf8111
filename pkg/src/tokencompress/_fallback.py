"""Pure-numpy versions of the compiled kernels, same signatures and order."""

import numpy as np


def matmul2d(a, b, out):
    out[...] = 0
    for t in range(a.shape[1]):
        out += a[:, t, None] * b[t, None, :]


def matmul3d(a, b, out):
    out[...] = 0
    for t in range(a.shape[2]):
        out += a[:, :, t, None] * b[:, t, None, :]


def normalize_rows(e):
    total = np.zeros((e.shape[0],), dtype=e.dtype)
    for j in range(e.shape[1]):
        total += e[:, j]
    e /= total[:, None]
