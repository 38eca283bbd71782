"""Kernel backend selection.

The compiled extension is preferred when importable; the pure-numpy
implementation is the fallback. ``RANKPRESS_BACKEND=python`` (or ``cython``)
forces a choice, which the tests and the kernel benchmark use to compare the
two implementations.
"""

from __future__ import annotations

import os

from . import _kernels_py

_requested = os.environ.get("RANKPRESS_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _kernels_py
elif _requested == "cython":
    from . import _kernels as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _kernels_py

KERNEL_BACKEND: str = _impl.BACKEND_NAME

jacobi_svd = _impl.jacobi_svd
jacobi_eigh = _impl.jacobi_eigh


def get_kernels(name: str):
    """Return the kernel module for an explicit backend name (benchmark use)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")
