"""Kernel backend selection.

Hot numeric loops are written once as plain Python over numpy arrays and
compiled with ``numba.njit`` unless ``TURBDET_NO_NUMBA=1`` is set (or numba
is missing), in which case each kernel module falls back to its vectorised
numpy twin.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("TURBDET_NO_NUMBA", "0").lower() not in ("1", "true", "yes")

NJIT_KWARGS = {"cache": True, "nogil": True}


def njit(fn):
    """Compile ``fn`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(**NJIT_KWARGS)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
