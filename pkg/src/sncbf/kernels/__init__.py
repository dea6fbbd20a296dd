"""Kernel backend selection.

The compiled Cython kernel is preferred when the extension built; otherwise
the vectorized numpy fallback is used. Set SNCBF_KERNEL=numpy to force the
fallback (useful for the backend-comparison benchmark).
"""
import os

from . import _ref

if os.environ.get("SNCBF_KERNEL", "").lower() == "numpy":
    _impl = _ref
else:
    try:
        from . import _qcore as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _ref

BACKEND = _impl.BACKEND
q_batch = _impl.q_batch

numpy_q_batch = _ref.q_batch
