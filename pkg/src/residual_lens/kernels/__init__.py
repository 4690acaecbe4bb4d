"""Hot kernels with a compiled backend and a NumPy fallback.

The compiled module is used when it was built and imports cleanly; set
``RESIDUAL_LENS_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

if os.environ.get("RESIDUAL_LENS_PURE_PYTHON", "") not in ("", "0"):
    native = None
else:
    try:
        from . import _native as native
    except ImportError:  # extension not built
        native = None

_impl = native if native is not None else _fallback
BACKEND = "native" if native is not None else "python"

two_nearest = _impl.two_nearest
greedy_match = _impl.greedy_match

__all__ = ["BACKEND", "fallback", "native", "two_nearest", "greedy_match"]
