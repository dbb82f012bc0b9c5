"""Optional numba acceleration.

Hot kernels are written once in a numba-compatible subset of Python and
decorated with :func:`njit`.  Setting ``NETSHIELD_DISABLE_NUMBA=1`` (or
running without numba installed) leaves them as plain Python functions,
which is the reference path the benchmark compares against.
"""

import os

_DISABLED = os.environ.get("NETSHIELD_DISABLE_NUMBA", "").strip().lower() in (
    "1",
    "true",
    "yes",
)

try:
    if _DISABLED:
        raise ImportError
    import numba as _numba

    NUMBA_ENABLED = True
except ImportError:
    _numba = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity otherwise."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap
