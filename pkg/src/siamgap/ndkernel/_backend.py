"""Select the compiled kernels if they import, else the numpy fallback.

Set ``SIAMGAP_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _npkernels

BACKEND = "numpy"
if os.environ.get("SIAMGAP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _npkernels
else:
    _impl = _npkernels

im2col = _impl.im2col
col2im = _impl.col2im


def kernels(name):
    """Return the ``(im2col, col2im)`` pair for ``"cython"`` or ``"numpy"``."""
    if name == "numpy":
        return _npkernels.im2col, _npkernels.col2im
    if name == "cython":
        from . import _ckernels

        return _ckernels.im2col, _ckernels.col2im
    raise ValueError(f"unknown backend {name!r}")
