"""Optional numba acceleration.

Hot kernels are written once in plain Python over numpy arrays and decorated
with :func:`njit`.  Setting ``THERMOFLOW_DISABLE_NUMBA=1`` in the environment
(before import) turns the decorator into a no-op, so the same source runs as
the pure-numpy/Python fallback path.  The two paths consume identical random
buffers and perform the same floating point operations, so they produce the
same trajectories.
"""

import os

_FLAG = "THERMOFLOW_DISABLE_NUMBA"


def _disabled_by_env():
    return os.environ.get(_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    if _disabled_by_env():
        raise ImportError("numba disabled by " + _FLAG)
    from numba import njit as _numba_njit

    HAVE_NUMBA = True
except ImportError:
    _numba_njit = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if HAVE_NUMBA:
        return _numba_njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap


def backend_name():
    return "numba" if HAVE_NUMBA else "python"
