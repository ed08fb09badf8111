"""Backend selection for the hot loops.

The compiled extension is used when it imports; setting
``TOKENCOMPRESS_BACKEND=python`` forces the numpy fallback.
"""

import os
from contextlib import contextmanager

import numpy as np

from . import _fallback

try:
    from . import _kernels

    HAVE_COMPILED = True
except ImportError:
    _kernels = None
    HAVE_COMPILED = False

if HAVE_COMPILED and os.environ.get("TOKENCOMPRESS_BACKEND", "").lower() != "python":
    _impl, BACKEND = _kernels, "cython"
else:
    _impl, BACKEND = _fallback, "python"


def get_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _fallback
    if name == "cython":
        if not HAVE_COMPILED:
            raise ImportError("compiled kernels are not built")
        return _kernels
    raise ValueError(f"unknown backend {name!r}")


@contextmanager
def use_backend(name):
    """Temporarily route every kernel call through backend ``name``."""
    global _impl, BACKEND
    saved = _impl, BACKEND
    _impl, BACKEND = get_backend(name), name
    try:
        yield
    finally:
        _impl, BACKEND = saved


def _resolve(backend):
    if backend is None:
        return _impl
    return get_backend(backend) if isinstance(backend, str) else backend


def matmul(a, b, backend=None):
    """Fixed-order product of 2-D or batched 3-D arrays with matching batch."""
    impl = _resolve(backend)
    a, b = np.ascontiguousarray(a), np.ascontiguousarray(b)
    if a.ndim == 2:
        out = np.empty((a.shape[0], b.shape[1]), dtype=a.dtype)
        impl.matmul2d(a, b, out)
    else:
        out = np.empty((a.shape[0], a.shape[1], b.shape[2]), dtype=a.dtype)
        impl.matmul3d(a, b, out)
    return out


def softmax_lastaxis(x, backend=None):
    # exp stays in numpy for both backends: libm and numpy's SIMD exp can
    # disagree in the last ulp, which would break bit-identity.
    impl = _resolve(backend)
    flat = np.ascontiguousarray(x).reshape(-1, x.shape[-1])
    out = np.exp(flat - flat.max(axis=1, keepdims=True))
    impl.normalize_rows(out)
    return out.reshape(x.shape)
