"""Optional numba acceleration.

Set ``FTDDM_DISABLE_NUMBA=1`` to force the pure-numpy code paths. When numba
is missing or disabled, :func:`njit` returns ``None`` so callers can tell a
compiled kernel apart from the vectorised numpy fallback.
"""
import os

DISABLED_BY_ENV = os.environ.get("FTDDM_DISABLE_NUMBA", "0").lower() in ("1", "true", "yes")

try:
    if DISABLED_BY_ENV:
        raise ImportError("numba disabled by FTDDM_DISABLE_NUMBA")
    import numba

    NUMBA_ENABLED = True
except ImportError:
    numba = None
    NUMBA_ENABLED = False


def njit(func):
    """Compile ``func`` in nopython mode, or return None without numba."""
    if not NUMBA_ENABLED:
        return None
    return numba.njit(cache=True, fastmath=False)(func)
