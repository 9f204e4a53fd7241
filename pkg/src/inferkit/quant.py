"""Block-level linear quantization codecs.

Each block of weights is stored as two binary16 numbers (block minimum and
maximum) followed by tightly packed codes.  Integer-bit codecs map a weight
onto ``2**k`` evenly spaced levels; the Q3H codec maps onto 11 levels and
stores two adjacent digits as one 7-bit value ``d0 * 11 + d1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import DecodeError, InputError, SchemeError


class Codec(str, Enum):
    FP16 = "FP16"
    Q8 = "Q8"
    Q6 = "Q6"
    Q5 = "Q5"
    Q4 = "Q4"
    Q3H = "Q3H"
    Q3 = "Q3"
    Q2 = "Q2"


BITS_PER_CODE = {
    Codec.FP16: Fraction(16),
    Codec.Q8: Fraction(8),
    Codec.Q6: Fraction(6),
    Codec.Q5: Fraction(5),
    Codec.Q4: Fraction(4),
    Codec.Q3H: Fraction(7, 2),
    Codec.Q3: Fraction(3),
    Codec.Q2: Fraction(2),
}

BLOCK_SIZES = (32, 64)
PAIR_BASE = 11
PAIR_MAX = PAIR_BASE * PAIR_BASE - 1


@dataclass(frozen=True)
class QuantScheme:
    codec: Codec
    block_size: int = 64

    def __post_init__(self):
        object.__setattr__(self, "codec", Codec(self.codec))
        if self.codec is Codec.FP16:
            return
        if self.block_size not in BLOCK_SIZES:
            raise SchemeError(f"block_size must be one of {BLOCK_SIZES}, got {self.block_size}")

    @classmethod
    def parse(cls, text: str) -> "QuantScheme":
        """Parse names such as ``Q4``, ``Q4_B32`` or ``q3h``."""
        name, _, suffix = text.strip().upper().partition("_B")
        try:
            codec = Codec(name)
        except ValueError:
            raise SchemeError(f"unknown quantization scheme {text!r}") from None
        return cls(codec, int(suffix) if suffix else 64)

    @property
    def name(self) -> str:
        if self.codec is Codec.FP16:
            return "FP16"
        return f"{self.codec.value}_B{self.block_size}"

    @property
    def bits_per_code(self) -> Fraction:
        return BITS_PER_CODE[self.codec]

    @property
    def pair(self) -> bool:
        return self.codec is Codec.Q3H

    @property
    def code_bits(self) -> int:
        """Width of one packed code (a digit pair for Q3H)."""
        if self.codec is Codec.FP16:
            raise SchemeError("FP16 is a storage type, not a block codec")
        return 7 if self.pair else int(self.bits_per_code)

    @property
    def levels(self) -> int:
        return 10 if self.pair else (1 << self.code_bits) - 1

    def payload_bytes(self, count: int | None = None) -> int:
        count = self.block_size if count is None else count
        return math.ceil(count * self.bits_per_code / 8)

    def serialized_size(self, count: int | None = None) -> int:
        return self.payload_bytes(count) + 4


def bits_per_weight(scheme: QuantScheme) -> Fraction:
    """Code bits plus the two binary16 block bounds amortized per weight."""
    if scheme.codec is Codec.FP16:
        return Fraction(16)
    return (scheme.block_size * scheme.bits_per_code + 2 * 16) / Fraction(scheme.block_size)


def pack_pair_35(q_even: int, q_odd: int) -> int:
    for d in (q_even, q_odd):
        if not 0 <= d <= 10:
            raise SchemeError(f"Q3H digit {d} outside [0, 10]")
    return q_even * PAIR_BASE + q_odd


def unpack_pair_35(value: int) -> tuple[int, int]:
    if not 0 <= value <= PAIR_MAX:
        raise DecodeError(f"Q3H pair value {value} outside [0, {PAIR_MAX}]")
    return value // PAIR_BASE, value % PAIR_BASE


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # x is non-negative here, so "away from zero" means "up".
    f = np.floor(x)
    return f + (x - f >= 0.5)


def encode_blocks(w: np.ndarray, scheme: QuantScheme):
    """Quantize rows of ``w`` (one block per row).

    Returns ``(lo, hi, digits)`` with lo/hi as float16 arrays and digits as
    int32 per-weight codes.  Digits are computed against the float16-rounded
    bounds so that encoder and decoder agree.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise InputError("weights must be finite")
    with np.errstate(over="ignore"):
        lo = w.min(axis=1).astype(np.float16)
        hi = w.max(axis=1).astype(np.float16)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise InputError("block bounds overflow binary16")
    lo64 = lo.astype(np.float64)[:, None]
    span = hi.astype(np.float64)[:, None] - lo64
    degenerate = span == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (w - lo64) / np.where(degenerate, 1.0, span) * scheme.levels
    x = np.clip(x, 0, scheme.levels)
    digits = np.where(degenerate, 0, _round_half_away(x)).astype(np.int32)
    return lo, hi, digits


def _to_codes(digits: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.pair:
        return digits[..., 0::2] * PAIR_BASE + digits[..., 1::2]
    return digits


@dataclass(frozen=True)
class QuantBlock:
    scheme: QuantScheme
    lo: np.float16
    hi: np.float16
    codes: bytes
    count: int

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise DecodeError("block minimum exceeds maximum")
        if len(self.codes) != self.scheme.payload_bytes(self.count):
            raise DecodeError(
                f"expected {self.scheme.payload_bytes(self.count)} payload bytes, got {len(self.codes)}"
            )

    def packed_values(self) -> np.ndarray:
        n = self.count // 2 if self.scheme.pair else self.count
        return kernels.unpack_codes(np.frombuffer(self.codes, dtype=np.uint8), self.scheme.code_bits, n)

    def digits(self) -> np.ndarray:
        vals = self.packed_values().astype(np.int32)
        if not self.scheme.pair:
            return vals
        if vals.size and vals.max() > PAIR_MAX:
            raise DecodeError(f"Q3H pair value {int(vals.max())} exceeds {PAIR_MAX}")
        out = np.empty(self.count, dtype=np.int32)
        out[0::2], out[1::2] = vals // PAIR_BASE, vals % PAIR_BASE
        return out

    def to_bytes(self) -> bytes:
        return np.float16(self.lo).astype("<f2").tobytes() + np.float16(self.hi).astype("<f2").tobytes() + self.codes

    @classmethod
    def from_bytes(cls, scheme: QuantScheme, data: bytes, count: int | None = None) -> "QuantBlock":
        count = scheme.block_size if count is None else count
        if len(data) != scheme.serialized_size(count):
            raise DecodeError(f"block needs {scheme.serialized_size(count)} bytes, got {len(data)}")
        lo, hi = np.frombuffer(data[:4], dtype="<f2")
        return cls(scheme, np.float16(lo), np.float16(hi), bytes(data[4:]), count)


def quantize_block(weights, scheme: QuantScheme, *, any_length: bool = False) -> QuantBlock:
    """Quantize one block.

    ``any_length=True`` accepts any even length >= 2 instead of exactly
    ``scheme.block_size`` (used for small worked examples).
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if scheme.codec is Codec.FP16:
        raise SchemeError("FP16 is a storage type, not a block codec")
    if any_length:
        if w.size < 2 or w.size % 2:
            raise SchemeError("test-mode blocks need an even length >= 2")
    elif w.size != scheme.block_size:
        raise SchemeError(f"block needs {scheme.block_size} weights, got {w.size}")
    lo, hi, digits = encode_blocks(w[None, :], scheme)
    codes = kernels.pack_codes(_to_codes(digits[0], scheme), scheme.code_bits)
    return QuantBlock(scheme, lo[0], hi[0], codes.tobytes(), w.size)


def dequantize_block(block: QuantBlock) -> np.ndarray:
    packed = np.frombuffer(block.codes, dtype=np.uint8)[None, :]
    lo = np.array([[block.lo]], dtype=np.float64)
    hi = np.array([[block.hi]], dtype=np.float64)
    out = kernels.dequantize_rows(packed, lo, hi, block.scheme.code_bits, block.scheme.pair, block.count)
    return out[0]


@dataclass(frozen=True)
class BlockErrorStats:
    per_weight_abs_error: np.ndarray
    avg_error: float


def block_error_stats(weights, scheme: QuantScheme, *, any_length: bool = False) -> BlockErrorStats:
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    restored = dequantize_block(quantize_block(w, scheme, any_length=any_length)).astype(np.float64)
    delta = np.abs(w - restored)
    return BlockErrorStats(delta, float(delta.mean()))


@dataclass(frozen=True)
class QuantizedMatrix:
    """A rows x cols matrix quantized in row-aligned blocks.

    ``packed`` is uint8 [rows, n_blocks * payload_bytes]; ``lo``/``hi`` are
    float16 [rows, n_blocks].
    """

    scheme: QuantScheme
    rows: int
    cols: int
    packed: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    @property
    def n_blocks(self) -> int:
        return self.cols // self.scheme.block_size

    def bounds64(self):
        return self.lo.astype(np.float64), self.hi.astype(np.float64)

    def dequantize(self) -> np.ndarray:
        lo, hi = self.bounds64()
        return kernels.dequantize_rows(
            self.packed, lo, hi, self.scheme.code_bits, self.scheme.pair, self.scheme.block_size
        )

    def blocks(self):
        pb = self.scheme.payload_bytes()
        for r in range(self.rows):
            for b in range(self.n_blocks):
                yield QuantBlock(
                    self.scheme, self.lo[r, b], self.hi[r, b],
                    self.packed[r, b * pb : (b + 1) * pb].tobytes(), self.scheme.block_size,
                )

    @classmethod
    def from_blocks(cls, scheme: QuantScheme, rows: int, cols: int, blocks) -> "QuantizedMatrix":
        blocks = list(blocks)
        nb = cols // scheme.block_size
        if cols % scheme.block_size or len(blocks) != rows * nb:
            raise SchemeError(f"{len(blocks)} blocks cannot tile a {rows}x{cols} matrix")
        for blk in blocks:
            if blk.scheme != scheme or blk.count != scheme.block_size:
                raise SchemeError("block scheme does not match matrix scheme")
        packed = np.frombuffer(b"".join(b.codes for b in blocks), dtype=np.uint8).reshape(rows, -1)
        lo = np.array([b.lo for b in blocks], dtype=np.float16).reshape(rows, nb)
        hi = np.array([b.hi for b in blocks], dtype=np.float16).reshape(rows, nb)
        return cls(scheme, rows, cols, packed.copy(), lo, hi)

    def to_bytes(self) -> bytes:
        return b"".join(blk.to_bytes() for blk in self.blocks())


def quantize_matrix(w, scheme: QuantScheme) -> QuantizedMatrix:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise SchemeError("quantize_matrix expects a 2-D array")
    rows, cols = w.shape
    bs = scheme.block_size
    if scheme.codec is Codec.FP16:
        raise SchemeError("FP16 is a storage type, not a block codec")
    if cols % bs:
        raise SchemeError(f"row length {cols} is not a multiple of block size {bs}")
    lo, hi, digits = encode_blocks(w.reshape(-1, bs), scheme)
    codes = _to_codes(digits, scheme)
    # Block payloads are byte-aligned for every legal block size, so packing
    # the whole code stream at once equals packing block by block.
    packed = kernels.pack_codes(codes.reshape(-1), scheme.code_bits).reshape(rows, -1)
    nb = cols // bs
    return QuantizedMatrix(scheme, rows, cols, packed, lo.reshape(rows, nb), hi.reshape(rows, nb))
