import os

import numba
from threadpoolctl import threadpool_limits

_limits = None


def thread_count():
    """Worker count from ``NEURONET_THREADS`` (default 1)."""
    raw = os.environ.get("NEURONET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return max(1, n)


def configure_threads(n=None):
    """Cap numba and BLAS parallelism; returns the applied count."""
    global _limits
    n = thread_count() if n is None else max(1, int(n))
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    _limits = threadpool_limits(limits=n)
    return n
