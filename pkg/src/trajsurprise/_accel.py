"""Numba switch.

Set ``TRAJSURPRISE_DISABLE_NUMBA=1`` before import to force the pure-numpy
kernels. Numba is also skipped silently when it is not installed.
"""

import os

ENV_FLAG = "TRAJSURPRISE_DISABLE_NUMBA"


def _disabled_by_env() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


try:
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _disabled_by_env()


def njit(fn):
    """Compile ``fn`` in nopython mode when numba is importable, else return None."""
    if not HAVE_NUMBA:
        return None
    return _numba.njit(cache=False, nogil=True)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
