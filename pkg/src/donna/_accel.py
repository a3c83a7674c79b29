"""Numba switch.

Set ``DONNA_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
from __future__ import annotations

import functools
import os

_DISABLED = os.environ.get("DONNA_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by DONNA_DISABLE_NUMBA")
    from numba import njit as _njit

    NUMBA_OK = True
except ImportError:
    NUMBA_OK = False
    _njit = None


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if NUMBA_OK:
        return _njit(*args, **kwargs)

    def decorator(f):
        @functools.wraps(f)
        def wrapper(*a, **kw):
            return f(*a, **kw)

        return wrapper

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return decorator(args[0])
    return decorator


__all__ = ["njit", "NUMBA_OK"]
