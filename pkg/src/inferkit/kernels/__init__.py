"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_pykernels`` is selected.  Set ``INFERKIT_KERNELS=python``
to force the fallback.  Both backends produce bit-identical results, and the
result never depends on the thread count.
"""

import os

from . import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("INFERKIT_KERNELS", "").lower() not in ("python", "py"):
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

_threads = max(1, int(os.environ.get("INFERKIT_THREADS", "1") or 1))


def set_num_threads(n: int) -> None:
    global _threads
    _threads = max(1, int(n))


def get_num_threads() -> int:
    return _threads


def backends() -> dict:
    """Name -> module for every backend that imports in this environment."""
    found = {"python": _pykernels}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found


def pack_codes(codes, nbits):
    return _impl.pack_codes(codes, nbits)


def unpack_codes(buf, nbits, count):
    return _impl.unpack_codes(buf, nbits, count)


def dequantize_rows(packed, lo, hi, nbits, pair, block_size):
    return _impl.dequantize_rows(packed, lo, hi, nbits, pair, block_size)


def matmul(x, w):
    return _impl.matmul(x, w, _threads)


def matmul_quant(x, packed, lo, hi, nbits, pair, block_size):
    return _impl.matmul_quant(x, packed, lo, hi, nbits, pair, block_size, _threads)
