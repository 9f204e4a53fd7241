"""Pure numpy implementation of the hot kernels.

Every function here is the behavioral reference for the compiled module in
``_ckernels.pyx``: both must produce bit-identical results.  Floating point
operations are spelled out in the same order in both files.
"""

import numpy as np

from ..errors import DecodeError, ShapeError

PAIR_MAX = 120


def pack_codes(codes, nbits):
    """Tightly pack unsigned codes of ``nbits`` each, little-endian bit order."""
    codes = np.ascontiguousarray(codes, dtype=np.uint16)
    if codes.size and int(codes.max()) >= (1 << nbits):
        raise ValueError(f"code does not fit in {nbits} bits")
    shifts = np.arange(nbits, dtype=np.uint16)
    bits = ((codes[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little")


def unpack_codes(buf, nbits, count):
    buf = np.ascontiguousarray(buf, dtype=np.uint8)
    if buf.size * 8 < nbits * count:
        raise ShapeError("packed buffer too short")
    bits = np.unpackbits(buf, bitorder="little")[: nbits * count]
    weights = (1 << np.arange(nbits, dtype=np.uint16)).astype(np.uint16)
    return (bits.reshape(count, nbits).astype(np.uint16) * weights).sum(axis=1).astype(np.uint8)


def _digits(packed, nbits, pair, block_size):
    """Unpack a [n_blocks, block_bytes] buffer to per-weight digits."""
    n_blocks = packed.shape[0]
    ncodes = block_size // 2 if pair else block_size
    bits = np.unpackbits(packed, axis=1, bitorder="little")[:, : ncodes * nbits]
    weights = (1 << np.arange(nbits, dtype=np.int32)).astype(np.int32)
    vals = (bits.reshape(n_blocks, ncodes, nbits).astype(np.int32) * weights).sum(axis=2)
    if not pair:
        return vals
    if vals.size and int(vals.max()) > PAIR_MAX:
        raise DecodeError(f"packed pair value {int(vals.max())} exceeds {PAIR_MAX}")
    out = np.empty((n_blocks, block_size), dtype=np.int32)
    out[:, 0::2] = vals // 11
    out[:, 1::2] = vals % 11
    return out


def dequantize_rows(packed, lo, hi, nbits, pair, block_size):
    """Dequantize a row-blocked matrix.

    ``packed`` is uint8 [rows, n_blocks * block_bytes]; ``lo``/``hi`` are
    float64 [rows, n_blocks].  Returns float32 [rows, n_blocks * block_size].
    """
    rows, n_blocks = lo.shape
    packed = np.ascontiguousarray(packed, dtype=np.uint8).reshape(rows * n_blocks, -1)
    q = _digits(packed, nbits, pair, block_size).astype(np.float64)
    levels = 10.0 if pair else float((1 << nbits) - 1)
    lo_f = np.ascontiguousarray(lo, dtype=np.float64).reshape(-1, 1)
    span = np.ascontiguousarray(hi, dtype=np.float64).reshape(-1, 1) - lo_f
    w = q / levels * span + lo_f
    return w.astype(np.float32).reshape(rows, n_blocks * block_size)


def matmul(x, w, threads=1):
    """x [m, k] @ w [k, n] with float32 accumulation, sequential over k."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    w = np.ascontiguousarray(w, dtype=np.float32)
    m, k = x.shape
    if w.shape[0] != k:
        raise ShapeError(f"inner dims differ: {x.shape} x {w.shape}")
    acc = np.zeros((m, w.shape[1]), dtype=np.float32)
    for kk in range(k):
        acc += x[:, kk : kk + 1] * w[kk]
    return acc


def matmul_quant(x, packed, lo, hi, nbits, pair, block_size, threads=1):
    x = np.ascontiguousarray(x, dtype=np.float32)
    if x.shape[1] != lo.shape[0]:
        raise ShapeError(f"inner dims differ: {x.shape[1]} vs {lo.shape[0]}")
    return matmul(x, dequantize_rows(packed, lo, hi, nbits, pair, block_size))
