"""Backend selection for the hot kernels.

``CAMFORGE_BACKEND=numpy`` forces the pure-numpy path; the default is
``numba`` when it imports, else numpy. ``CAMFORGE_THREADS`` caps numba's
worker threads.
"""

import contextlib
import os

from . import _numpy_kernels

# the bundled TBB is too old for numba and only produces a warning
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
    from . import _numba_kernels
except ImportError:  # pragma: no cover
    numba = None
    _numba_kernels = None

_FUNCS = ("conv2d_forward", "conv2d_backward", "maxpool2_forward", "maxpool2_backward")

BACKENDS = {"numpy": _numpy_kernels}
if _numba_kernels is not None:
    BACKENDS["numba"] = _numba_kernels

backend = None


def set_backend(name):
    """Route every kernel call through backend ``name``."""
    global backend
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(BACKENDS)}")
    mod = BACKENDS[name]
    for fn in _FUNCS:
        globals()[fn] = getattr(mod, fn)
    backend = name


@contextlib.contextmanager
def using(name):
    prev = backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _apply_thread_cap():
    cap = os.environ.get("CAMFORGE_THREADS")
    if numba is None or not cap:
        return
    numba.set_num_threads(max(1, min(int(cap), numba.config.NUMBA_NUM_THREADS)))


_default = os.environ.get("CAMFORGE_BACKEND", "numba" if "numba" in BACKENDS else "numpy").lower()
set_backend(_default if _default in BACKENDS else "numpy")
_apply_thread_cap()
