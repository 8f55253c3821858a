"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``AFF_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
average_precision_batch = _kernels_py.average_precision_batch

if os.environ.get("AFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        average_precision_batch = _kernels.average_precision_batch
