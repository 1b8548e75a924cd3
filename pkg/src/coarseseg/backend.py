"""Kernel backend selection.

Hot inner loops (im2col/col2im, pooling, nearest resize, per-pixel
confusion-matrix products, masked NLL, column softmax, trace sums) exist
twice: as numba @njit kernels and as vectorized pure-numpy equivalents.
The env var COARSESEG_BACKEND picks one:

    COARSESEG_BACKEND=numba   force numba (error if numba missing)
    COARSESEG_BACKEND=numpy   force the pure-numpy path
    COARSESEG_BACKEND=auto    numba when importable, else numpy (default)

Matrix multiplies (convolution GEMMs) go through numpy/BLAS in both
backends. `benchmarks/bench_backends.py` compares the two paths.
"""

from __future__ import annotations

import os

_VALID = ("auto", "numba", "numpy")


def _resolve() -> str:
    choice = os.environ.get("COARSESEG_BACKEND", "auto").lower()
    if choice not in _VALID:
        raise ValueError(
            f"COARSESEG_BACKEND must be one of {_VALID}, got {choice!r}"
        )
    if choice in ("auto", "numba"):
        try:
            import numba  # noqa: F401

            return "numba"
        except ImportError:
            if choice == "numba":
                raise
            return "numpy"
    return "numpy"


BACKEND = _resolve()

if BACKEND == "numba":
    from . import _kernels_numba as kernels
else:
    from . import _kernels_numpy as kernels


def get_kernels(name: str | None = None):
    """Return the kernel module for `name` ('numba'/'numpy', default: active)."""
    if name is None or name == BACKEND:
        return kernels
    if name == "numba":
        from . import _kernels_numba

        return _kernels_numba
    if name == "numpy":
        from . import _kernels_numpy

        return _kernels_numpy
    raise ValueError(f"unknown backend {name!r}")
