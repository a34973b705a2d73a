"""Optional numba compilation.

Set ``LFNSIM_DISABLE_JIT=1`` to run the array kernels as plain Python on
numpy scalars (slow, but handy for debugging and for the benchmark baseline).
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

JIT_ENABLED = numba is not None and os.environ.get("LFNSIM_DISABLE_JIT", "") in ("", "0")


def jit(fn=None, *, refcounted: bool = True):
    """``numba.njit`` with caching.

    ``refcounted=False`` compiles without numba's runtime, which removes the
    atomic reference counting on every array argument.  Only valid for
    functions that neither allocate nor return arrays or lists.
    """
    if fn is None:
        return lambda f: jit(f, refcounted=refcounted)
    if not JIT_ENABLED:
        return fn
    opts = {} if refcounted else {"_nrt": False}
    return numba.njit(cache=True, nogil=True, **opts)(fn)
