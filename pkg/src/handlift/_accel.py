"""numba shim.

Set ``HANDLIFT_NO_NUMBA=1`` to force the pure-numpy kernels (also used when
numba is not importable).
"""
import os

USE_NUMBA = os.environ.get("HANDLIFT_NO_NUMBA", "").strip().lower() not in ("1", "true", "yes")

try:
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None
    USE_NUMBA = False

NUMBA_AVAILABLE = _nb is not None


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise a passthrough decorator."""
    if _nb is None:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _nb.njit(*args, **kwargs)
