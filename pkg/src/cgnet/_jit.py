"""JIT switch.

Hot kernels are compiled with numba unless ``CGNET_DISABLE_JIT`` is set to a
truthy value, in which case the vectorised numpy implementations in
:mod:`cgnet.kernels` are used instead. ``CGNET_THREADS`` caps the numba
worker pool.
"""

import os

_FALSEY = {"", "0", "false", "no", "off"}

JIT_ENABLED = os.environ.get("CGNET_DISABLE_JIT", "").strip().lower() in _FALSEY

if JIT_ENABLED:
    try:
        import numba
        from numba import njit, prange

        # TBB builds shipped with some distros are too old for numba and
        # trigger a warning on first parallel launch.
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]
    except ImportError:  # pragma: no cover - numba is a declared dependency
        JIT_ENABLED = False

if not JIT_ENABLED:
    numba = None

    def njit(func=None, **kwargs):
        if func is not None:
            return func

        def wrapper(f):
            return f

        return wrapper

    prange = range


def configure_threads(n=None):
    """Cap the numba worker pool; returns the effective thread count."""
    if n is None:
        raw = os.environ.get("CGNET_THREADS", "").strip()
        if not raw:
            return numba.get_num_threads() if JIT_ENABLED else 1
        n = int(raw)
    if n < 1:
        raise ValueError(f"CGNET_THREADS must be >= 1, got {n}")
    if not JIT_ENABLED:
        return 1
    n = min(n, numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(n)
    return n


configure_threads()
