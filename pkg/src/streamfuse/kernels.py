"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``STREAMFUSE_PURE`` is set to a non-empty value other
than ``0``) the numpy fallback is used. ``BACKEND`` names the active one.
"""
import os

import numpy as np

from . import _kernels_py

if os.environ.get("STREAMFUSE_PURE", "0") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
        BACKEND = "python"


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython" or "python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col3x3(x, stride):
    """Channels-last 3x3 patches, see ``_kernels_py.im2col3x3``."""
    return _impl.im2col3x3(np.ascontiguousarray(x), stride)


def col2im3x3(cols, shape, stride):
    return _impl.col2im3x3(np.ascontiguousarray(cols), tuple(shape), stride)


def levinson_batch(r, order):
    return _impl.levinson_batch(np.ascontiguousarray(r, dtype=np.float64), order)


def _to_ids(ref, hyp):
    table = {}
    r = np.fromiter((table.setdefault(u, len(table)) for u in ref), dtype=np.int64, count=len(ref))
    h = np.fromiter((table.setdefault(u, len(table)) for u in hyp), dtype=np.int64, count=len(hyp))
    return r, h


def edit_counts(ref, hyp):
    """(substitutions, deletions, insertions) for two unit sequences."""
    r, h = _to_ids(ref, hyp)
    return _impl.edit_counts(r, h)
