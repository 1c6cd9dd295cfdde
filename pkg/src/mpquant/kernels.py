"""Kernel backend selection.

The compiled extension is preferred when it was built; otherwise the numpy
fallback provides identical behavior. ``BACKEND`` records which one is live.
``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

from . import _kernels_py

try:
    from . import _kernels as _impl  # type: ignore[attr-defined]
except ImportError:
    _impl = _kernels_py

BACKEND: str = _impl.BACKEND_NAME

quantize_codes = _impl.quantize_codes
pack_codes = _impl.pack_codes
unpack_codes = _impl.unpack_codes


def available_backends() -> dict:
    """Name -> module for every importable backend."""
    backends = {"numpy": _kernels_py}
    if _impl is not _kernels_py:
        backends["cython"] = _impl
    return backends
