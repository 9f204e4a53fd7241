# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.  Must stay bit-identical to ``_pykernels``.

Built with ``-ffp-contract=off`` so that ``acc += x * w`` is a rounded
float32 multiply followed by a rounded float32 add, exactly like numpy.
"""

import numpy as np

from cython.parallel cimport parallel, prange
from libc.stdint cimport uint8_t, uint16_t
from libc.stdlib cimport free, malloc

from ..errors import DecodeError, ShapeError

cdef enum:
    CHUNK = 64


cdef inline unsigned int _read_code(const uint8_t* buf, Py_ssize_t nbytes,
                                    Py_ssize_t bit, int nbits) noexcept nogil:
    cdef Py_ssize_t byte = bit >> 3
    cdef unsigned int v = buf[byte]
    if byte + 1 < nbytes:
        v = v | ((<unsigned int>buf[byte + 1]) << 8)
    return (v >> (bit & 7)) & ((1u << nbits) - 1)


cdef inline int _dequant_block(const uint8_t* blk, Py_ssize_t block_bytes,
                               double lo, double hi, int nbits, bint pair,
                               int block_size, float* out) noexcept nogil:
    cdef double span = hi - lo
    cdef double levels
    cdef int i
    cdef unsigned int v
    if pair:
        levels = 10.0
        for i in range(block_size // 2):
            v = _read_code(blk, block_bytes, i * 7, 7)
            if v > 120:
                return -1
            out[2 * i] = <float>((<double>(v // 11)) / levels * span + lo)
            out[2 * i + 1] = <float>((<double>(v % 11)) / levels * span + lo)
    else:
        levels = <double>((1 << nbits) - 1)
        for i in range(block_size):
            v = _read_code(blk, block_bytes, i * nbits, nbits)
            out[i] = <float>((<double>v) / levels * span + lo)
    return 0


def pack_codes(codes, int nbits):
    cdef uint16_t[::1] cv = np.ascontiguousarray(codes, dtype=np.uint16)
    cdef Py_ssize_t n = cv.shape[0]
    cdef Py_ssize_t i, bit
    cdef unsigned int c
    cdef unsigned int limit = 1u << nbits
    out = np.zeros((n * nbits + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    for i in range(n):
        c = cv[i]
        if c >= limit:
            raise ValueError(f"code does not fit in {nbits} bits")
        bit = i * nbits
        ov[bit >> 3] |= <uint8_t>((c << (bit & 7)) & 0xFF)
        if (bit & 7) + nbits > 8:
            ov[(bit >> 3) + 1] |= <uint8_t>(c >> (8 - (bit & 7)))
    return out


def unpack_codes(buf, int nbits, Py_ssize_t count):
    cdef const uint8_t[::1] bv = np.ascontiguousarray(buf, dtype=np.uint8)
    cdef Py_ssize_t nbytes = bv.shape[0]
    cdef Py_ssize_t i
    if nbytes * 8 < nbits * count:
        raise ShapeError("packed buffer too short")
    out = np.empty(count, dtype=np.uint8)
    cdef uint8_t[::1] ov = out
    for i in range(count):
        ov[i] = <uint8_t>_read_code(&bv[0], nbytes, i * nbits, nbits)
    return out


def dequantize_rows(packed, lo, hi, int nbits, bint pair, int block_size):
    cdef double[:, ::1] lov = np.ascontiguousarray(lo, dtype=np.float64)
    cdef double[:, ::1] hiv = np.ascontiguousarray(hi, dtype=np.float64)
    cdef Py_ssize_t rows = lov.shape[0]
    cdef Py_ssize_t nb = lov.shape[1]
    cdef const uint8_t[:, ::1] pv = np.ascontiguousarray(packed, dtype=np.uint8).reshape(rows, -1)
    cdef Py_ssize_t block_bytes = pv.shape[1] // nb if nb else 0
    out = np.empty((rows, nb * block_size), dtype=np.float32)
    cdef float[:, ::1] ov = out
    cdef Py_ssize_t r, b
    for r in range(rows):
        for b in range(nb):
            if _dequant_block(&pv[r, b * block_bytes], block_bytes, lov[r, b], hiv[r, b],
                              nbits, pair, block_size, &ov[r, b * block_size]) != 0:
                raise DecodeError("packed pair value exceeds 120")
    return out


def matmul(x, w, int threads=1):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const float[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t k = xv.shape[1]
    if wv.shape[0] != k:
        raise ShapeError(f"inner dims differ: {(m, k)} x {(wv.shape[0], wv.shape[1])}")
    cdef Py_ssize_t n = wv.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    cdef float[:, ::1] ov = out
    cdef Py_ssize_t nchunks = (n + CHUNK - 1) // CHUNK
    cdef Py_ssize_t c, i, kk, j, j0, j1
    cdef float xik
    for c in prange(nchunks, nogil=True, num_threads=threads, schedule="static"):
        j0 = c * CHUNK
        j1 = j0 + CHUNK
        if j1 > n:
            j1 = n
        for i in range(m):
            for kk in range(k):
                xik = xv[i, kk]
                for j in range(j0, j1):
                    ov[i, j] = ov[i, j] + xik * wv[kk, j]
    return out


def matmul_quant(x, packed, lo, hi, int nbits, bint pair, int block_size, int threads=1):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const double[:, ::1] lov = np.ascontiguousarray(lo, dtype=np.float64)
    cdef const double[:, ::1] hiv = np.ascontiguousarray(hi, dtype=np.float64)
    cdef Py_ssize_t m = xv.shape[0]
    cdef Py_ssize_t k = lov.shape[0]
    cdef Py_ssize_t nb = lov.shape[1]
    if xv.shape[1] != k:
        raise ShapeError(f"inner dims differ: {xv.shape[1]} vs {k}")
    cdef const uint8_t[:, ::1] pv = np.ascontiguousarray(packed, dtype=np.uint8).reshape(k, -1)
    cdef Py_ssize_t block_bytes = pv.shape[1] // nb if nb else 0
    out = np.zeros((m, nb * block_size), dtype=np.float32)
    cdef float[:, ::1] ov = out
    failed_arr = np.zeros(1, dtype=np.int32)
    cdef int[::1] failed = failed_arr
    cdef Py_ssize_t b, i, kk, jj, base
    cdef float xik
    cdef float* buf
    with nogil, parallel(num_threads=threads):
        buf = <float*>malloc(block_size * sizeof(float))
        for b in prange(nb, schedule="static"):
            base = b * block_size
            for kk in range(k):
                if _dequant_block(&pv[kk, b * block_bytes], block_bytes, lov[kk, b], hiv[kk, b],
                                  nbits, pair, block_size, buf) != 0:
                    failed[0] = 1
                    continue
                for i in range(m):
                    xik = xv[i, kk]
                    for jj in range(block_size):
                        ov[i, base + jj] = ov[i, base + jj] + xik * buf[jj]
        free(buf)
    if failed_arr[0]:
        raise DecodeError("packed pair value exceeds 120")
    return out
