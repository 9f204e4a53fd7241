"""Weight files: a native quantized container, a safetensors subset, random weights.

Native container (all integers little-endian)::

    magic  b"IKNT"   version u16 = 1   tensor count u32
    per tensor:
        name length u16, name (utf-8)
        scheme id u8, block_size u16
        dim count u8, dims u32 each
        block count u32
        payload

Scheme ids: 0 raw fp32, 1 raw fp16, then 2..8 for Q8 Q6 Q5 Q4 Q3H Q3 Q2.  Raw
tensors have block_size 0, block count 0 and a payload of ``prod(dims)``
little-endian floats.  Quantized tensors are 2-D, split into row-aligned
blocks, each serialized as lo f16, hi f16, packed codes.

Safetensors subset: u64 header length, a JSON header mapping names to
``{"dtype": "F32"|"F16", "shape": [...], "data_offsets": [begin, end]}``
(plus optional ``"__metadata__"``), then the data section.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import gqa_from_mha, tensor_shapes
from .errors import (
    IntegrityError,
    ParseError,
    SchemeError,
    ShapeError,
    UnmappedTensorError,
    UnsupportedDtypeError,
)
from .modelspec import ModelSpec, print_spec, resolve_tensor_name
from .quant import Codec, QuantizedMatrix, QuantScheme
from .tensorcore import WeightMatrix

log = logging.getLogger(__name__)

MAGIC = b"IKNT"
VERSION = 1
SCHEME_IDS = {"fp32": 0, "fp16": 1, Codec.Q8: 2, Codec.Q6: 3, Codec.Q5: 4, Codec.Q4: 5, Codec.Q3H: 6, Codec.Q3: 7, Codec.Q2: 8}
_ID_TO_SCHEME = {v: k for k, v in SCHEME_IDS.items()}
SAFETENSORS_DTYPES = {"F32": np.dtype("<f4"), "F16": np.dtype("<f2")}


def spec_fingerprint(spec: ModelSpec | None) -> str:
    if spec is None:
        return ""
    return hashlib.sha256(print_spec(spec).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Canonically named tensors: 2-D ones as WeightMatrix, others as float32 arrays."""

    tensors: dict[str, object]
    dtypes: dict[str, str] = field(default_factory=dict)
    fingerprint: str = ""

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self) -> list[str]:
        return sorted(self.tensors)

    def array(self, name: str) -> np.ndarray:
        t = self.tensors[name]
        return t.dense() if isinstance(t, WeightMatrix) else np.asarray(t, np.float32)


def _as_tensor(arr: np.ndarray):
    if arr.ndim == 2:
        return WeightMatrix.from_array(arr.astype(np.float32), "fp32")
    return np.ascontiguousarray(arr, dtype=np.float32)


# --------------------------------------------------------------------------
# load-time canonicalization


def _interleave_columns(w: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    """Reorder each head's columns from half-split ``[x0..x(h/2-1), y0..]`` to ``[x0, y0, x1, y1, ...]``."""
    half = head_dim // 2
    order = np.empty(head_dim, dtype=np.int64)
    order[0::2] = np.arange(half)
    order[1::2] = np.arange(half, head_dim)
    cols = (np.arange(n_heads)[:, None] * head_dim + order[None, :]).reshape(-1)
    return w[:, cols]


def canonicalize(spec: ModelSpec, tensors: dict[str, object]) -> dict[str, object]:
    """Split fused QKV, reorder Q/K columns and mean-pool KV heads as the spec says."""
    out = dict(tensors)
    hd, h, g = spec.head_dim, spec.decoder_heads, spec.decoder_kv_heads

    def dense(name):
        t = out[name]
        return t.dense() if isinstance(t, WeightMatrix) else np.asarray(t, np.float32)

    prefixes = sorted({n[: -len(s)] for n in out for s in ("q.weight", "qkv.weight") if n.endswith(s)})
    for p in prefixes:
        if spec.qkv_format == 1 and p + "qkv.weight" in out:
            fused = dense(p + "qkv.weight")
            kv = (fused.shape[1] - h * hd) // 2
            out[p + "q.weight"] = fused[:, : h * hd]
            out[p + "k.weight"] = fused[:, h * hd : h * hd + kv]
            out[p + "v.weight"] = fused[:, h * hd + kv :]
            del out[p + "qkv.weight"]
        if p + "k.weight" not in out:
            continue
        k, v = dense(p + "k.weight"), dense(p + "v.weight")
        if spec.qk_column_order == 1 and spec.position_embedding == "rope":
            out[p + "q.weight"] = _interleave_columns(dense(p + "q.weight"), h, hd)
            k = _interleave_columns(k, k.shape[1] // hd, hd)
            out[p + "k.weight"] = k
        if k.shape[1] == h * hd and g < h:
            rows = k.shape[0]
            pk, pv = gqa_from_mha(k.reshape(rows, h, hd), v.reshape(rows, h, hd), g, axis=1)
            out[p + "k.weight"] = pk.reshape(rows, g * hd)
            out[p + "v.weight"] = pv.reshape(rows, g * hd)
    for name, t in out.items():
        if isinstance(t, np.ndarray) and t.ndim == 2:
            out[name] = WeightMatrix.from_array(t, "fp32")
    return out


def _finish(spec: ModelSpec | None, raw: dict[str, object], dtypes: dict[str, str], strict: bool) -> Checkpoint:
    if spec is None:
        return Checkpoint(dict(sorted(raw.items())), dtypes)
    tensors: dict[str, object] = {}
    kinds: dict[str, str] = {}
    for ext in sorted(raw):
        try:
            name = resolve_tensor_name(spec, ext)
        except UnmappedTensorError:
            if strict:
                raise
            log.warning("skipping unmapped tensor %s", ext)
            continue
        if name in tensors:
            raise IntegrityError(f"two tensors resolve to {name}")
        tensors[name] = raw[ext]
        kinds[name] = dtypes[ext]
    tensors = canonicalize(spec, tensors)
    expected = tensor_shapes(spec)
    for name, shape in expected.items():
        if name not in tensors:
            raise ShapeError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[name].shape) != shape:
            raise ShapeError(f"{name} has dims {tuple(tensors[name].shape)}, expected {shape}")
    extra = sorted(set(tensors) - set(expected))
    if extra:
        if strict:
            raise IntegrityError(f"tensors not used by the model: {', '.join(extra)}")
        log.warning("ignoring %d tensors not used by the model", len(extra))
        for name in extra:
            del tensors[name]
    kinds = {n: kinds.get(n, "F32") for n in tensors}
    return Checkpoint(dict(sorted(tensors.items())), kinds, spec_fingerprint(spec))


# --------------------------------------------------------------------------
# safetensors subset


def read_safetensors(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Raw tensors in their stored dtype, plus the ``__metadata__`` map."""
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise ParseError("file too short for the header length", 0)
    (n,) = struct.unpack_from("<Q", buf, 0)
    if 8 + n > len(buf):
        raise ParseError(f"header length {n} exceeds file size {len(buf)}", 0)
    try:
        header = json.loads(buf[8 : 8 + n].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError("header is not utf-8", 8 + e.start) from None
    except json.JSONDecodeError as e:
        raise ParseError(f"malformed header: {e.msg}", 8 + e.pos) from None
    if not isinstance(header, dict):
        raise ParseError("header must be a JSON object", 8)
    metadata = header.pop("__metadata__", {}) or {}
    data = memoryview(buf)[8 + n :]
    spans = []
    tensors: dict[str, np.ndarray] = {}
    for name, entry in header.items():
        if not isinstance(entry, dict) or not {"dtype", "shape", "data_offsets"} <= entry.keys():
            raise ParseError(f"entry {name!r} needs dtype, shape and data_offsets", 8)
        dtype = SAFETENSORS_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise UnsupportedDtypeError(f"{name}: dtype {entry['dtype']} is not F32 or F16")
        shape = tuple(int(d) for d in entry["shape"])
        begin, end = (int(o) for o in entry["data_offsets"])
        if not 0 <= begin <= end <= len(data):
            raise IntegrityError(f"{name}: offsets [{begin}, {end}) outside the {len(data)}-byte data section")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise IntegrityError(f"{name}: {end - begin} bytes cannot hold shape {list(shape)}")
        spans.append((begin, end, name))
        tensors[name] = np.frombuffer(data[begin:end], dtype=dtype).reshape(shape).copy()
    spans.sort()
    for (_, e0, a), (b1, _, b) in zip(spans, spans[1:]):
        if b1 < e0:
            raise IntegrityError(f"tensors {a} and {b} overlap")
    return tensors, dict(metadata)


def write_safetensors(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None) -> None:
    header: dict[str, object] = {}
    if metadata:
        header["__metadata__"] = dict(metadata)
    chunks, offset = [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = {np.dtype(np.float32): "F32", np.dtype(np.float16): "F16"}.get(arr.dtype)
        if tag is None:
            raise UnsupportedDtypeError(f"{name}: cannot write dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=SAFETENSORS_DTYPES[tag]).tobytes()
        header[name] = {"dtype": tag, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        chunks.append(raw)
        offset += len(raw)
    text = json.dumps(header, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    Path(path).write_bytes(struct.pack("<Q", len(text)) + text + b"".join(chunks))


def load_safetensors(path, spec: ModelSpec | None = None, *, strict: bool = True) -> Checkpoint:
    """Load, resolve names, upcast fp16 to fp32 and check against the spec's graph."""
    raw, _ = read_safetensors(path)
    dtypes = {n: {np.dtype("<f2"): "F16"}.get(a.dtype, "F32") for n, a in raw.items()}
    tensors = {n: _as_tensor(a.astype(np.float32)) for n, a in raw.items()}
    return _finish(spec, tensors, dtypes, strict)


def save_checkpoint_safetensors(path, ckpt: Checkpoint) -> None:
    write_safetensors(path, {n: ckpt.array(n) for n in ckpt.tensors})


# --------------------------------------------------------------------------
# native container


def save_native(path, tensors: dict[str, object]) -> None:
    """Write WeightMatrix (fp32/fp16/quant) or array tensors, sorted by name."""
    out = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name in sorted(tensors):
        t = tensors[name]
        enc = name.encode("utf-8")
        out.append(struct.pack("<H", len(enc)) + enc)
        if isinstance(t, WeightMatrix) and t.storage == "quant":
            qm = t.data
            dims = (qm.rows, qm.cols)
            out.append(struct.pack("<BH", SCHEME_IDS[qm.scheme.codec], qm.scheme.block_size))
            out.append(struct.pack("<B", 2) + struct.pack("<2I", *dims))
            out.append(struct.pack("<I", qm.rows * qm.n_blocks))
            out.append(qm.to_bytes())
            continue
        if isinstance(t, WeightMatrix):
            arr, kind = t.data, t.storage
        else:
            arr = np.asarray(t)
            kind = "fp16" if arr.dtype == np.float16 else "fp32"
        dt = "<f2" if kind == "fp16" else "<f4"
        out.append(struct.pack("<BH", SCHEME_IDS[kind], 0))
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<I", 0))
        out.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError(f"file truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_native(path) -> tuple[dict[str, object], dict[str, str]]:
    """Raw tensors keyed by stored name, and the stored kind of each."""
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise ParseError("not a native container (bad magic)", 0)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}", 4)
    tensors: dict[str, object] = {}
    kinds: dict[str, str] = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        sid, bs = r.unpack("<BH")
        (nd,) = r.unpack("<B")
        dims = r.unpack(f"<{nd}I")
        (nblocks,) = r.unpack("<I")
        kind = _ID_TO_SCHEME.get(sid)
        if kind is None:
            raise IntegrityError(f"{name}: unknown scheme id {sid}")
        if kind in ("fp32", "fp16"):
            if nblocks:
                raise IntegrityError(f"{name}: raw tensor declares {nblocks} blocks")
            dt = np.dtype("<f2" if kind == "fp16" else "<f4")
            arr = np.frombuffer(r.take(math.prod(dims) * dt.itemsize), dtype=dt).reshape(dims)
            tensors[name] = WeightMatrix.from_array(arr, kind) if nd == 2 else arr.astype(np.float32)
            kinds[name] = kind.upper()
            continue
        try:
            scheme = QuantScheme(kind, bs)
        except SchemeError as e:
            raise IntegrityError(f"{name}: {e}") from None
        if nd != 2 or dims[1] % bs or nblocks != dims[0] * dims[1] // bs:
            raise IntegrityError(f"{name}: {nblocks} {scheme.name} blocks do not tile dims {list(dims)}")
        size = scheme.serialized_size()
        blob = np.frombuffer(r.take(nblocks * size), dtype=np.uint8).reshape(nblocks, size)
        rows, cols = dims
        lo = blob[:, 0:2].copy().view("<f2").reshape(rows, -1).astype(np.float16)
        hi = blob[:, 2:4].copy().view("<f2").reshape(rows, -1).astype(np.float16)
        if np.any(lo > hi) or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise IntegrityError(f"{name}: block bounds are not ordered finite values")
        packed = np.ascontiguousarray(blob[:, 4:]).reshape(rows, -1)
        tensors[name] = WeightMatrix.from_quantized(QuantizedMatrix(scheme, rows, cols, packed, lo, hi))
        kinds[name] = scheme.name
    if r.pos != len(r.buf):
        raise IntegrityError(f"{len(r.buf) - r.pos} trailing bytes after the last tensor")
    return tensors, kinds


def load_native(path, spec: ModelSpec | None = None, *, strict: bool = True) -> Checkpoint:
    tensors, kinds = read_native(path)
    return _finish(spec, tensors, kinds, strict)


def load_checkpoint(path, spec: ModelSpec, *, strict: bool = True) -> Checkpoint:
    """Dispatch on the spec's ``model_file_format``."""
    if spec.model_file_format == "safetensors":
        return load_safetensors(path, spec, strict=strict)
    return load_native(path, spec, strict=strict)


# --------------------------------------------------------------------------
# random weights


def random_checkpoint(spec: ModelSpec, seed: int) -> Checkpoint:
    """Seeded Gaussian weights with scale ``1/sqrt(hidden_dim)``.

    Norm gains are ``1 + noise`` and biases plain noise so that every tensor
    is exercised.  Tensors are drawn in sorted-name order.
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(spec.hidden_dim)
    tensors: dict[str, object] = {}
    for name, shape in sorted(tensor_shapes(spec).items()):
        draw = rng.standard_normal(shape) * scale
        if len(shape) == 1 and name.endswith(".weight"):
            draw = draw + 1.0
        tensors[name] = _as_tensor(draw)
    return Checkpoint(tensors, {n: "F32" for n in tensors}, spec_fingerprint(spec))


def quantize_checkpoint(ckpt: Checkpoint, scheme: QuantScheme) -> tuple[Checkpoint, list[str]]:
    """Quantize every 2-D tensor whose rows tile into blocks; returns skipped names."""
    out, kinds, skipped = {}, {}, []
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name]
        if isinstance(t, WeightMatrix) and (scheme.codec is Codec.FP16 or t.cols % scheme.block_size == 0):
            out[name] = WeightMatrix.from_array(t.dense(), scheme)
            kinds[name] = scheme.name
        else:
            out[name] = t
            kinds[name] = ckpt.dtypes.get(name, "F32")
            if isinstance(t, WeightMatrix):
                skipped.append(name)
    return Checkpoint(out, kinds, ckpt.fingerprint), skipped
