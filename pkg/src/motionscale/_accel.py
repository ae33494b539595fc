"""Numba switch.

Kernels are written once as plain Python loops over numpy arrays. When numba is
importable and ``MOTIONSCALE_DISABLE_NUMBA`` is unset (or ``0``), they are
compiled with ``@njit``; otherwise the call sites fall back to the vectorized
numpy implementations in :mod:`motionscale.kernels`.
"""
import os

_flag = os.environ.get("MOTIONSCALE_DISABLE_NUMBA", "0").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError
    from numba import njit as _njit

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover - exercised only without numba
    _njit = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` with caching, or identity when numba is off."""
    if not NUMBA_ENABLED:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
    kwargs.setdefault("cache", True)
    return _njit(*args, **kwargs)
