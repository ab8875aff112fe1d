"""Array kernels with a compiled fast path.

The Cython extension is picked at import time when available; setting
EDGEPATCH_PURE_PYTHON=1 forces the numpy fallback (useful for A/B
benchmarks and for environments without a compiler). Both backends
implement the same contracts; see tests/test_kernels.py for the parity
suite.
"""

import os

from . import reference

if os.environ.get("EDGEPATCH_PURE_PYTHON"):
    _impl = reference
else:
    try:
        from . import _fastops as _impl
    except ImportError:
        _impl = reference

BACKEND = _impl.BACKEND

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
resize_bilinear = _impl.resize_bilinear
resize_bilinear_grad = _impl.resize_bilinear_grad

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "resize_bilinear",
    "resize_bilinear_grad",
    "reference",
]
