"""Optional numba acceleration.

Set ``GROUPCLIP_DISABLE_NUMBA=1`` to force the pure-numpy kernels. When numba
is not importable the numpy path is used automatically.
"""

from __future__ import annotations

import os

_DISABLED = os.environ.get("GROUPCLIP_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError("disabled by GROUPCLIP_DISABLE_NUMBA")
    import numba as _nb

    HAVE_NUMBA = True
except ImportError:
    _nb = None
    HAVE_NUMBA = False


def njit(fn):
    """``numba.njit(cache=True)`` when available, else a plain Python function.

    No ``fastmath``: reassociated reductions would break bit-for-bit
    reproducibility.
    """
    if not HAVE_NUMBA:
        return fn
    return _nb.njit(cache=True)(fn)


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
