"""Optional numba acceleration.

Set ``DUALMPC_DISABLE_JIT=1`` to run every kernel on the pure-numpy path.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}

JIT_DISABLED = os.environ.get("DUALMPC_DISABLE_JIT", "").strip().lower() not in _FALSY

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_JIT = HAVE_NUMBA and not JIT_DISABLED


def njit(fn=None, **kwargs):
    """``numba.njit`` with on-disk caching, or identity without numba."""
    kwargs.setdefault("cache", True)

    def wrap(f):
        if not HAVE_NUMBA:
            return f
        return numba.njit(**kwargs)(f)

    return wrap(fn) if fn is not None else wrap
