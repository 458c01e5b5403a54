"""Optional numba acceleration.

Hot kernels are written once as plain Python loops and decorated with
:func:`njit`. When numba is missing or ``FLOWREG_DISABLE_NUMBA=1`` is set,
``njit`` is the identity and callers dispatch to their vectorized numpy
implementations instead (plain-Python loops would be far too slow).
"""
import os

_disabled = os.environ.get("FLOWREG_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("disabled by FLOWREG_DISABLE_NUMBA")
    from numba import njit as _numba_njit

    NUMBA_ENABLED = True
except ImportError:
    _numba_njit = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    if NUMBA_ENABLED:
        return _numba_njit(*args, cache=True, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda f: f


def backend_name():
    return "numba" if NUMBA_ENABLED else "numpy"
