"""Kernel backend selection.

The hot inner loops (conv2d forward/backward, row softmax) exist twice:
a numba-jitted version and a pure-numpy fallback. The active backend is
chosen once at import time from the ``ADFUSE_BACKEND`` environment variable:

    ADFUSE_BACKEND=numba   force numba (raises if numba is unavailable)
    ADFUSE_BACKEND=numpy   force the pure-numpy path
    unset / auto           numba when importable, else numpy

``benchmarks/bench_backends.py`` compares the two paths.
"""

import os

from adfuse.errors import InvalidConfigError

from . import numpy_impl

_ENV_VAR = "ADFUSE_BACKEND"


def _select():
    choice = os.environ.get(_ENV_VAR, "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise InvalidConfigError(f"{_ENV_VAR} must be auto|numba|numpy, got {choice!r}")
    if choice == "numpy":
        return numpy_impl
    try:
        from . import numba_impl
    except ImportError:
        if choice == "numba":
            raise InvalidConfigError("ADFUSE_BACKEND=numba but numba is not importable")
        return numpy_impl
    return numba_impl


_impl = _select()

conv2d_forward = _impl.conv2d_forward
conv2d_backward_dx = _impl.conv2d_backward_dx
conv2d_backward_dw = _impl.conv2d_backward_dw
softmax_forward = _impl.softmax_forward
softmax_backward = _impl.softmax_backward


def backend_name() -> str:
    return _impl.NAME
