"""Backend selection for the inner loops.

The compiled Cython module is used when it imports; otherwise, or when
``RRCNN_PURE_PYTHON=1`` is set, the numpy versions are used. ``BACKEND``
names the active one.
"""
import os

from . import _npkernels

if os.environ.get("RRCNN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _npkernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _npkernels

BACKEND = "cython" if _impl is not _npkernels else "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
im2col_batch = _impl.im2col_batch
col2im_batch = _impl.col2im_batch
maxpool2_forward = _impl.maxpool2_forward
maxpool2_backward = _impl.maxpool2_backward
upsample2_forward = _impl.upsample2_forward
upsample2_backward = _impl.upsample2_backward
