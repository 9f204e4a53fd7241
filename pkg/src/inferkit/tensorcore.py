"""Dense float32 arithmetic over fp32, fp16, or block-quantized weights.

Tensors are plain C-contiguous numpy arrays.  Weight matrices are wrapped in
:class:`WeightMatrix` so the engine can multiply against any storage type
without caring how it is held.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError
from .quant import QuantizedMatrix, QuantScheme, quantize_matrix


class WeightMatrix:
    """A ``rows x cols`` weight used as ``y = x @ W``.

    ``storage`` is ``"fp32"``, ``"fp16"`` or ``"quant"``.  Quantized rows are
    split into blocks of ``scheme.block_size`` columns, so no block straddles
    a row.
    """

    __slots__ = ("rows", "cols", "storage", "data")

    def __init__(self, rows: int, cols: int, storage: str, data):
        self.rows = rows
        self.cols = cols
        self.storage = storage
        self.data = data

    @classmethod
    def from_array(cls, arr, storage: str | QuantScheme = "fp32") -> "WeightMatrix":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ShapeError(f"weight matrix must be 2-D, got shape {arr.shape}")
        rows, cols = arr.shape
        if isinstance(storage, QuantScheme):
            if storage.codec.value == "FP16":
                storage = "fp16"
            else:
                return cls(rows, cols, "quant", quantize_matrix(arr, storage))
        if storage == "fp32":
            return cls(rows, cols, "fp32", np.ascontiguousarray(arr, dtype=np.float32))
        if storage == "fp16":
            return cls(rows, cols, "fp16", np.ascontiguousarray(arr, dtype=np.float16))
        raise ValueError(f"unknown storage {storage!r}")

    @classmethod
    def from_quantized(cls, qm: QuantizedMatrix) -> "WeightMatrix":
        return cls(qm.rows, qm.cols, "quant", qm)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def scheme(self) -> QuantScheme | None:
        return self.data.scheme if self.storage == "quant" else None

    def dense(self) -> np.ndarray:
        """Float32 copy of the effective (dequantized) weights."""
        if self.storage == "quant":
            return self.data.dequantize()
        return self.data.astype(np.float32)

    def __repr__(self):
        tag = self.data.scheme.name if self.storage == "quant" else self.storage
        return f"WeightMatrix({self.rows}x{self.cols}, {tag})"


def matmul(x, w) -> np.ndarray:
    """``x [m, k] @ W [k, n]`` with float32 accumulation in fixed k order.

    Quantized weights are dequantized block by block inside the kernel; the
    result equals ``matmul(x, w.dense())`` bit for bit.
    """
    x = np.asarray(x, dtype=np.float32)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if isinstance(w, WeightMatrix):
        if x.shape[1] != w.rows:
            raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
        if w.storage == "quant":
            qm = w.data
            lo, hi = qm.bounds64()
            y = kernels.matmul_quant(x, qm.packed, lo, hi, qm.scheme.code_bits, qm.scheme.pair, qm.scheme.block_size)
        else:
            y = kernels.matmul(x, w.data.astype(np.float32, copy=False))
    else:
        w = np.asarray(w, dtype=np.float32)
        if w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
        y = kernels.matmul(x, w)
    return y[0] if squeeze else y


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax in float64; ``-inf`` entries map to 0."""
    v = np.asarray(v, dtype=np.float64)
    m = np.max(v, axis=axis, keepdims=True)
    e = np.exp(v - m)
    return e / e.sum(axis=axis, keepdims=True)
