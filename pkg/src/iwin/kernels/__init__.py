"""Backend selection for the hot sampling kernels.

The compiled Cython module is preferred when it was built; the pure-numpy
fallback is always available. ``IWIN_PURE_PYTHON=1`` forces the fallback
(used by the equivalence tests and the benchmark).
"""

from __future__ import annotations

import os

import numpy as np

from . import reference

if os.environ.get("IWIN_PURE_PYTHON"):
    _impl = reference
else:
    try:
        from . import _fast as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = reference

BACKEND = _impl.NAME


def _prep(arr, ndim, dtype):
    arr = np.ascontiguousarray(arr, dtype=dtype)
    if not arr.flags.writeable:
        arr = arr.copy()  # compiled backend takes writable buffers only
    if arr.ndim != ndim:
        raise ValueError(f"expected rank {ndim}, got shape {arr.shape}")
    return arr


def _dtype_of(z):
    dt = np.asarray(z).dtype
    return dt if dt in (np.float32, np.float64) else np.float64


def bilinear_gather(z, px, py):
    """Sample z (B, C, H, W) at fractional (px, py) of shape (B, P) -> (B, P, C)."""
    dt = _dtype_of(z)
    return _impl.bilinear_gather(_prep(z, 4, dt), _prep(px, 2, dt), _prep(py, 2, dt))


def bilinear_gather_grad(z, px, py, dout):
    """Gradients of bilinear_gather w.r.t. (z, px, py)."""
    dt = _dtype_of(z)
    return _impl.bilinear_gather_grad(
        _prep(z, 4, dt), _prep(px, 2, dt), _prep(py, 2, dt), _prep(dout, 3, dt))


def get_backends():
    """Both backend modules, for equivalence checks and benchmarking."""
    backends = {"numpy": reference}
    if _impl is not reference:
        backends[_impl.NAME] = _impl
    else:
        try:
            from . import _fast  # type: ignore[attr-defined]
            backends[_fast.NAME] = _fast
        except ImportError:
            pass
    return backends
