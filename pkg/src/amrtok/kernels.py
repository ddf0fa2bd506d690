"""Backend selection for the hot flux kernel.

The compiled Cython extension is preferred when importable; otherwise the
numpy implementation is used. Set AMRTOK_FORCE_PYTHON=1 to pin the numpy
path (used by the kernel benchmark and the parity tests). Both backends
are bit-identical, so the choice never affects results.
"""
import os

from . import _euler_numpy

if os.environ.get("AMRTOK_FORCE_PYTHON"):
    _impl = _euler_numpy
    BACKEND = "numpy (forced)"
else:
    try:
        from ._native import _euler as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _euler_numpy
        BACKEND = "numpy"

muscl_rusanov_sweep = _impl.muscl_rusanov_sweep
