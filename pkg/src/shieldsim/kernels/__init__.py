"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time from ``SHIELDSIM_BACKEND``
(``numba`` or ``numpy``; default ``numba`` when it is importable).  Both
backends are bit-identical; ``tests/test_kernels.py`` checks that and
``benchmarks/bench_kernels.py`` times them against each other.
"""
import os

from . import _vector

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_NAMES = (
    "secded_encode_batch",
    "secded_decode_batch",
    "masked_wrap_sums",
    "array_gemm_int",
    "array_gemm_float",
)


def _jit_namespace():
    from types import SimpleNamespace

    from . import _loops

    jit = numba.njit(cache=True)
    return SimpleNamespace(**{name: jit(getattr(_loops, name)) for name in _NAMES})


def available_backends():
    return ("numba", "numpy") if numba is not None else ("numpy",)


def get_backend(name):
    """Namespace holding the five kernels for ``name``."""
    if name == "numba":
        if numba is None:
            raise RuntimeError("numba is not installed")
        global _JIT
        if _JIT is None:
            _JIT = _jit_namespace()
        return _JIT
    if name == "numpy":
        return _vector
    raise ValueError(f"unknown backend {name!r}")


_JIT = None
BACKEND = os.environ.get("SHIELDSIM_BACKEND", "numba").strip().lower()
if BACKEND == "numba" and numba is None:
    BACKEND = "numpy"
_impl = get_backend(BACKEND)

secded_encode_batch = _impl.secded_encode_batch
secded_decode_batch = _impl.secded_decode_batch
masked_wrap_sums = _impl.masked_wrap_sums
array_gemm_int = _impl.array_gemm_int
array_gemm_float = _impl.array_gemm_float
