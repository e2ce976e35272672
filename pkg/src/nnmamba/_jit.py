"""Numba switch.

Set ``NNM_DISABLE_NUMBA=1`` to run every kernel through its pure-numpy
fallback. ``NNM_THREADS`` caps the number of numba worker threads.
"""
import os

_FALSY = {"", "0", "false", "no", "off"}

NUMBA_DISABLED = os.environ.get("NNM_DISABLE_NUMBA", "").strip().lower() not in _FALSY

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

HAVE_NUMBA = numba is not None
JIT_ENABLED = HAVE_NUMBA and not NUMBA_DISABLED

if JIT_ENABLED:
    from numba import njit, prange

    # deterministic static scheduling; also skips probing an outdated TBB
    if "NUMBA_THREADING_LAYER" not in os.environ:
        numba.config.THREADING_LAYER = "workqueue"
else:  # pragma: no cover - exercised with NNM_DISABLE_NUMBA=1

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    prange = range


def set_threads(n=None):
    """Cap kernel parallelism; ``None`` reads ``NNM_THREADS``."""
    if n is None:
        env = os.environ.get("NNM_THREADS")
        if not env:
            return
        n = int(env)
    n = max(1, int(n))
    if JIT_ENABLED:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


set_threads()
