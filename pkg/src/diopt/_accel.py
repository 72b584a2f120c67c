"""Numba toggle.

Set ``DIOPT_NUMBA=0`` in the environment to force the pure-numpy code
paths.  The switch is read once, at import time.
"""

import os

_FLAG = os.environ.get("DIOPT_NUMBA", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

USE_NUMBA = _numba is not None and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is available, otherwise the identity."""
    if _numba is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)


def set_threads():
    n = os.environ.get("DIOPT_THREADS")
    if n and _numba is not None:
        _numba.set_num_threads(max(1, min(int(n), _numba.config.NUMBA_NUM_THREADS)))
