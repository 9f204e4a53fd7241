"""Transformer forward pass assembled from spec-selected building blocks.

All three network types share one pre-norm block::

    h = h + SelfAttention(norm(h))
    h = h + CrossAttention(norm(h), memory)      # encoder_decoder decoders only
    h = h + Down(act(Up(norm(h))))

Canonical tensor names (``x @ W`` orientation, so projections are
``[in, out]``)::

    embed.weight                    [vocab, hidden]
    {p}attn_norm.weight / .bias     [hidden]          (bias only for std norm)
    {p}attn.q.weight                [hidden, H * head_dim]
    {p}attn.k.weight, attn.v.weight [hidden, G * head_dim]
    {p}attn.o.weight                [H * head_dim, hidden]
    {p}cross_norm.*, {p}cross.*     as attn, encoder_decoder decoders only
    {p}ffn_norm.weight / .bias      [hidden]
    {p}ffn.up.weight                [hidden, ffn]
    {p}ffn.down.weight              [ffn, hidden]
    final_norm.weight / .bias       [hidden]          (decoders only)
    lm_head.weight                  [hidden, vocab]   (decoders only)

with ``{p}`` = ``layers.{i}.`` for decoder layers and ``encoder.layers.{i}.``
for encoder layers.  The encoder output is the raw residual stream (no final
norm).

Determinism: matrix products go through the fixed-order kernels, and every
elementwise transcendental runs row by row on arrays whose shape does not
depend on how rows were batched.  A slot's logits are therefore bit-identical
whether it is decoded alone or next to other slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContextOverflowError, ShapeError
from .modelspec import ModelSpec
from .tensorcore import WeightMatrix, matmul, softmax

EPS = 1e-5
ROPE_BASE = 10000.0

_erf = np.vectorize(math.erf, otypes=[np.float64])


# --------------------------------------------------------------------------
# atomic building blocks


def normalize(v, kind: str, gain, bias=None) -> np.ndarray:
    """RMS or standard layer normalization of one vector."""
    v = np.asarray(v, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    if gain.shape != v.shape[-1:]:
        raise ShapeError(f"gain has shape {gain.shape}, expected {v.shape[-1:]}")
    if kind == "rms":
        out = v / np.sqrt(np.mean(v * v) + EPS) * gain
    elif kind == "std":
        c = v - np.mean(v)
        out = c / np.sqrt(np.mean(c * c) + EPS) * gain
        if bias is not None:
            out = out + np.asarray(bias, dtype=np.float64)
    else:
        raise ValueError(f"unknown normalization {kind!r}")
    return out.astype(np.float32)


def activate(v, kind: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(v, 0.0)
    elif kind == "silu":
        out = v / (1.0 + np.exp(-v))
    elif kind == "gelu":
        out = 0.5 * v * (1.0 + _erf(v / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return out.astype(np.float32)


def rope_tables(max_context: int, head_dim: int):
    """cos/sin of ``pos * 10000**(-2i/head_dim)``, shape [max_context, head_dim/2]."""
    if head_dim % 2:
        raise ShapeError("rope needs an even head_dim")
    inv = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(max_context, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def apply_rope(x, cos, sin) -> np.ndarray:
    """Rotate consecutive pairs ``(2i, 2i+1)`` of each head vector in ``x [..., hd]``."""
    x = np.asarray(x, dtype=np.float64)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out.astype(np.float32)


def position_encode(heads, pos: int, kind: str) -> np.ndarray:
    """Apply a position embedding to per-head vectors ``[n_heads, hd]`` at ``pos``.

    ``sinusoidal`` is an additive table on the hidden state (see
    :func:`sinusoidal_table`), so here it is the identity like ``empty``.
    """
    heads = np.asarray(heads, dtype=np.float32)
    if kind != "rope":
        return heads.copy()
    cos, sin = rope_tables(pos + 1, heads.shape[-1])
    return apply_rope(heads, cos[pos], sin[pos])


def sinusoidal_table(max_context: int, dim: int) -> np.ndarray:
    pos = np.arange(max_context, dtype=np.float64)[:, None]
    inv = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.zeros((max_context, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(pos * inv)
    table[:, 1::2] = np.cos(pos * inv)[:, : dim // 2]
    return table.astype(np.float32)


def gqa_from_mha(k_heads, v_heads, groups: int, axis: int = 0):
    """Mean-pool contiguous runs of ``H / groups`` heads along ``axis``."""
    k_heads = np.asarray(k_heads)
    v_heads = np.asarray(v_heads)
    h = k_heads.shape[axis]
    if groups < 1 or h % groups:
        raise ShapeError(f"{h} heads cannot form {groups} groups")

    def pool(a):
        a = np.moveaxis(a, axis, 0)
        pooled = a.reshape((groups, h // groups) + a.shape[1:]).mean(axis=1, dtype=np.float64)
        return np.moveaxis(pooled.astype(a.dtype), 0, axis)

    return pool(k_heads), pool(v_heads)


@dataclass(frozen=True)
class AttentionConfig:
    heads: int
    groups: int
    head_dim: int

    def __post_init__(self):
        if self.groups < 1 or self.heads % self.groups:
            raise ShapeError(f"kv groups {self.groups} must divide heads {self.heads}")

    def group_of(self, head: int) -> int:
        return head // (self.heads // self.groups)


def attend(q, keys, values, cfg: AttentionConfig) -> np.ndarray:
    """Scaled dot-product attention of one position over ``keys``/``values``.

    ``q`` is [H, hd]; ``keys``/``values`` are [T, G, hd].  Returns the
    concatenated head outputs [H * hd] (before the output projection).
    """
    q = np.asarray(q, dtype=np.float64)
    groups = np.arange(cfg.heads) // (cfg.heads // cfg.groups)
    k = np.asarray(keys, dtype=np.float64)[:, groups, :]
    v = np.asarray(values, dtype=np.float64)[:, groups, :]
    scores = (k * q[None, :, :]).sum(axis=-1) / math.sqrt(cfg.head_dim)
    p = softmax(scores, axis=0)
    ctx = (p[:, :, None] * v).sum(axis=0)
    return ctx.reshape(-1).astype(np.float32)


def attend_sequence(q, k, v, cfg: AttentionConfig, causal: bool) -> np.ndarray:
    """Whole-sequence attention without a cache; q [T, H, hd], k/v [S, G, hd]."""
    groups = np.arange(cfg.heads) // (cfg.heads // cfg.groups)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)[:, groups, :]
    v = np.asarray(v, dtype=np.float64)[:, groups, :]
    scores = np.einsum("thd,shd->hts", q, k) / math.sqrt(cfg.head_dim)
    if causal:
        t, s = scores.shape[1:]
        mask = np.triu(np.ones((t, s), dtype=bool), k=1)
        scores = np.where(mask[None], -np.inf, scores)
    p = softmax(scores, axis=-1)
    ctx = np.einsum("hts,shd->thd", p, v)
    return ctx.reshape(ctx.shape[0], -1).astype(np.float32)


# --------------------------------------------------------------------------
# model


def tensor_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Every canonical tensor the spec's graph needs, with its dims."""
    d, f, vocab = spec.hidden_dim, spec.ffn_dim, spec.vocab_size
    qd = spec.decoder_heads * spec.head_dim
    kvd = spec.decoder_kv_heads * spec.head_dim
    with_bias = spec.normalization_function == "std"
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (vocab, d)}

    def norm(name):
        shapes[f"{name}.weight"] = (d,)
        if with_bias:
            shapes[f"{name}.bias"] = (d,)

    def attn(prefix):
        shapes[f"{prefix}.q.weight"] = (d, qd)
        shapes[f"{prefix}.k.weight"] = (d, kvd)
        shapes[f"{prefix}.v.weight"] = (d, kvd)
        shapes[f"{prefix}.o.weight"] = (qd, d)

    def block(p, cross):
        norm(p + "attn_norm")
        attn(p + "attn")
        if cross:
            norm(p + "cross_norm")
            attn(p + "cross")
        norm(p + "ffn_norm")
        shapes[p + "ffn.up.weight"] = (d, f)
        shapes[p + "ffn.down.weight"] = (f, d)

    for i in range(spec.n_encoder_layers):
        block(f"encoder.layers.{i}.", False)
    for i in range(spec.n_decoder_layers):
        block(f"layers.{i}.", spec.network_type == "encoder_decoder")
    if spec.n_decoder_layers:
        norm("final_norm")
        shapes["lm_head.weight"] = (d, vocab)
    return shapes


class Model:
    """Immutable spec + weights, plus precomputed position tables."""

    def __init__(self, spec: ModelSpec, tensors: dict):
        self.spec = spec
        self.weights = dict(tensors)
        for name, shape in tensor_shapes(spec).items():
            if name not in self.weights:
                raise ShapeError(f"missing tensor {name}")
            t = self.weights[name]
            if tuple(t.shape) != shape:
                raise ShapeError(f"{name} has dims {tuple(t.shape)}, expected {shape}")
        emb = self.weights["embed.weight"]
        self.embed = emb.dense() if isinstance(emb, WeightMatrix) else np.asarray(emb, np.float32)
        self.attn_cfg = AttentionConfig(spec.decoder_heads, spec.decoder_kv_heads, spec.head_dim)
        self.rope_cos = self.rope_sin = None
        if spec.position_embedding == "rope":
            self.rope_cos, self.rope_sin = rope_tables(spec.max_context, spec.head_dim)
        self.sinusoid = None
        if spec.position_embedding == "sinusoidal":
            self.sinusoid = sinusoidal_table(spec.max_context, spec.hidden_dim)

    @classmethod
    def from_checkpoint(cls, spec: ModelSpec, ckpt) -> "Model":
        return cls(spec, ckpt.tensors)

    def w(self, name: str):
        return self.weights[name]

    # row-wise helpers: fixed-shape per-row evaluation keeps rows independent

    def norm_rows(self, x, name: str) -> np.ndarray:
        gain = self.weights[f"{name}.weight"]
        bias = self.weights.get(f"{name}.bias")
        kind = self.spec.normalization_function
        return np.stack([normalize(row, kind, gain, bias) for row in x]) if len(x) else x.copy()

    def act_rows(self, x) -> np.ndarray:
        kind = self.spec.activation_function
        return np.stack([activate(row, kind) for row in x]) if len(x) else x.copy()

    def rope_rows(self, x, positions) -> np.ndarray:
        if self.rope_cos is None:
            return x
        return np.stack(
            [apply_rope(x[r], self.rope_cos[p], self.rope_sin[p]) for r, p in enumerate(positions)]
        )

    def embed_rows(self, tokens, positions) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise ShapeError("token id outside vocabulary")
        x = self.embed[tokens].astype(np.float32)
        if self.sinusoid is not None:
            x = x + self.sinusoid[np.asarray(positions, dtype=np.int64)]
        return x

    # sublayers over whole sequences (no cache); the partition simulator
    # calls these with head / column ranges

    def attention_partial(self, xn, prefix: str, positions, causal: bool, heads=None, memory=None):
        """Self (or cross, when ``memory`` is given) attention over a head range.

        Returns this head range's contribution to the output projection.
        """
        spec, cfg = self.spec, self.attn_cfg
        hd = spec.head_dim
        h0, h1 = heads if heads is not None else (0, cfg.heads)
        rep = cfg.heads // cfg.groups
        g0, g1 = h0 // rep, (h1 - 1) // rep + 1
        full = heads is None
        wq = self.weights[f"{prefix}.q.weight"]
        wk = self.weights[f"{prefix}.k.weight"]
        wv = self.weights[f"{prefix}.v.weight"]
        wo = self.weights[f"{prefix}.o.weight"]
        if not full:
            wq = wq.dense()[:, h0 * hd : h1 * hd]
            wk = wk.dense()[:, g0 * hd : g1 * hd]
            wv = wv.dense()[:, g0 * hd : g1 * hd]
            wo = wo.dense()[h0 * hd : h1 * hd, :]
        src = xn if memory is None else memory
        q = matmul(xn, wq).reshape(len(xn), h1 - h0, hd)
        k = matmul(src, wk).reshape(len(src), g1 - g0, hd)
        v = matmul(src, wv).reshape(len(src), g1 - g0, hd)
        if memory is None:
            q = self.rope_rows(q, positions)
            k = self.rope_rows(k, positions)
        sub = AttentionConfig(h1 - h0, g1 - g0, hd)
        ctx = attend_sequence(q, k, v, sub, causal=causal and memory is None)
        return matmul(ctx, wo)

    def ffn_partial(self, xn, prefix: str, cols=None):
        up = self.weights[f"{prefix}ffn.up.weight"]
        down = self.weights[f"{prefix}ffn.down.weight"]
        if cols is not None:
            c0, c1 = cols
            up = up.dense()[:, c0:c1]
            down = down.dense()[c0:c1, :]
        return matmul(self.act_rows(matmul(xn, up)), down)

    def logits_rows(self, x) -> np.ndarray:
        return matmul(self.norm_rows(x, "final_norm"), self.weights["lm_head.weight"])

    def encode(self, tokens) -> np.ndarray:
        """Bidirectional encoder stack; returns hidden states [T, hidden]."""
        if self.spec.n_encoder_layers == 0 and self.spec.network_type == "decoder_only":
            raise ConfigurationError("decoder_only models have no encoder")
        positions = np.arange(len(tokens))
        x = self.embed_rows(tokens, positions)
        for i in range(self.spec.n_encoder_layers):
            p = f"encoder.layers.{i}."
            x = x + self.attention_partial(self.norm_rows(x, p + "attn_norm"), p + "attn", positions, causal=False)
            x = x + self.ffn_partial(self.norm_rows(x, p + "ffn_norm"), p)
        return x

    def forward_full(self, tokens, memory=None) -> np.ndarray:
        """Logits for every position of ``tokens`` computed without a KV cache."""
        if self.spec.network_type == "encoder_only":
            raise ConfigurationError("encoder-only models do not generate")
        if self.spec.network_type == "encoder_decoder" and memory is None:
            raise ConfigurationError("encoder_decoder forward needs encoder memory")
        positions = np.arange(len(tokens))
        if len(tokens) > self.spec.max_context:
            raise ContextOverflowError("sequence longer than max_context")
        x = self.embed_rows(tokens, positions)
        for i in range(self.spec.n_decoder_layers):
            p = f"layers.{i}."
            x = x + self.attention_partial(self.norm_rows(x, p + "attn_norm"), p + "attn", positions, causal=True)
            if memory is not None:
                x = x + self.attention_partial(
                    self.norm_rows(x, p + "cross_norm"), p + "cross", positions, causal=False, memory=memory
                )
            x = x + self.ffn_partial(self.norm_rows(x, p + "ffn_norm"), p)
        return self.logits_rows(x)


# --------------------------------------------------------------------------
# cached incremental decoding


class _Slot:
    __slots__ = ("keys", "values", "length", "tokens", "cross")

    def __init__(self, n_layers, max_context, groups, head_dim):
        self.keys = [np.zeros((max_context, groups, head_dim), np.float32) for _ in range(n_layers)]
        self.values = [np.zeros((max_context, groups, head_dim), np.float32) for _ in range(n_layers)]
        self.length = 0
        self.tokens: list[int] = []
        self.cross = None


class KvCache:
    """Per-slot, per-layer key/value storage [position, kv_head, head_dim]."""

    def __init__(self, spec: ModelSpec, capacity: int):
        self.spec = spec
        self.capacity = capacity
        self.slots: dict[int, _Slot] = {}
        self._next = 0

    def open(self) -> int:
        if len(self.slots) >= self.capacity:
            raise ContextOverflowError(f"all {self.capacity} cache slots are in use")
        sid = self._next
        self._next += 1
        s = self.spec
        self.slots[sid] = _Slot(s.n_decoder_layers, s.max_context, s.decoder_kv_heads, s.head_dim)
        return sid

    def close(self, slot: int) -> None:
        self.slots.pop(slot, None)

    def get(self, slot: int) -> _Slot:
        try:
            return self.slots[slot]
        except KeyError:
            raise KeyError(f"unknown slot {slot}") from None

    def length(self, slot: int) -> int:
        return self.get(slot).length

    def truncate(self, slot: int, length: int) -> None:
        st = self.get(slot)
        if length > st.length:
            raise ValueError("cannot truncate a slot forward")
        st.length = length
        del st.tokens[length:]


class Engine:
    """Runs batched decode steps over KV-cache slots of one immutable model."""

    def __init__(self, model: Model, max_slots: int = 8):
        self.model = model
        self.spec = model.spec
        self.cache = KvCache(model.spec, max_slots)

    def open_slot(self, encoder_tokens=None) -> int:
        if self.spec.network_type == "encoder_only":
            raise ConfigurationError("encoder-only models do not generate")
        sid = self.cache.open()
        if self.spec.network_type == "encoder_decoder":
            if encoder_tokens is None:
                self.cache.close(sid)
                raise ConfigurationError("encoder_decoder slots need encoder input")
            self.set_encoder_input(sid, encoder_tokens)
        return sid

    def close_slot(self, slot: int) -> None:
        self.cache.close(slot)

    def set_encoder_input(self, slot: int, tokens) -> None:
        """Encode ``tokens`` and store per-layer cross-attention keys/values."""
        memory = self.model.encode(tokens)
        hd, g = self.spec.head_dim, self.spec.decoder_kv_heads
        cross = []
        for i in range(self.spec.n_decoder_layers):
            k = matmul(memory, self.model.w(f"layers.{i}.cross.k.weight")).reshape(len(memory), g, hd)
            v = matmul(memory, self.model.w(f"layers.{i}.cross.v.weight")).reshape(len(memory), g, hd)
            cross.append((k, v))
        self.cache.get(slot).cross = cross

    def encode(self, tokens) -> np.ndarray:
        return self.model.encode(tokens)

    def history(self, slot: int) -> list[int]:
        return list(self.cache.get(slot).tokens)

    def forward(self, rows) -> np.ndarray:
        """Process ``(slot, token)`` rows in one batch; returns logits per row.

        Several rows may target the same slot; they occupy consecutive
        positions in the order given (this is how prompts are prefilled).
        """
        model, spec, cfg = self.model, self.spec, self.model.attn_cfg
        if spec.network_type == "encoder_only":
            raise ConfigurationError("encoder-only models do not generate")
        rows = [(int(s), int(t)) for s, t in rows]
        if not rows:
            return np.zeros((0, spec.vocab_size), np.float32)
        positions, nxt = [], {}
        for slot, _ in rows:
            st = self.cache.get(slot)
            p = nxt.get(slot, st.length)
            if p >= spec.max_context:
                raise ContextOverflowError(f"slot {slot} exceeds max_context {spec.max_context}")
            positions.append(p)
            nxt[slot] = p + 1
        n, hd = len(rows), spec.head_dim
        x = model.embed_rows([t for _, t in rows], positions)
        for i in range(spec.n_decoder_layers):
            p = f"layers.{i}."
            xn = model.norm_rows(x, p + "attn_norm")
            q = model.rope_rows(matmul(xn, model.w(p + "attn.q.weight")).reshape(n, cfg.heads, hd), positions)
            k = model.rope_rows(matmul(xn, model.w(p + "attn.k.weight")).reshape(n, cfg.groups, hd), positions)
            v = matmul(xn, model.w(p + "attn.v.weight")).reshape(n, cfg.groups, hd)
            for r, (slot, _) in enumerate(rows):
                st = self.cache.slots[slot]
                st.keys[i][positions[r]] = k[r]
                st.values[i][positions[r]] = v[r]
            ctx = np.empty((n, cfg.heads * hd), np.float32)
            for r, (slot, _) in enumerate(rows):
                st = self.cache.slots[slot]
                t = positions[r] + 1
                ctx[r] = attend(q[r], st.keys[i][:t], st.values[i][:t], cfg)
            x = x + matmul(ctx, model.w(p + "attn.o.weight"))
            if spec.network_type == "encoder_decoder":
                xn = model.norm_rows(x, p + "cross_norm")
                qc = matmul(xn, model.w(p + "cross.q.weight")).reshape(n, cfg.heads, hd)
                for r, (slot, _) in enumerate(rows):
                    ck, cv = self.cache.slots[slot].cross[i]
                    ctx[r] = attend(qc[r], ck, cv, cfg)
                x = x + matmul(ctx, model.w(p + "cross.o.weight"))
            x = x + model.ffn_partial(model.norm_rows(x, p + "ffn_norm"), p)
        for slot, tok in rows:
            st = self.cache.slots[slot]
            st.tokens.append(tok)
            st.length += 1
        return model.logits_rows(x)

    def forward_step(self, batch) -> list[np.ndarray]:
        """One decode step for each ``(slot, token)``; at most one row per slot."""
        slots = [s for s, _ in batch]
        if len(set(slots)) != len(slots):
            raise ValueError("forward_step takes one token per slot")
        return list(self.forward(batch))

    def prefill(self, slot: int, tokens) -> np.ndarray:
        """Append a whole prompt to ``slot``; returns logits of its last token."""
        return self.forward([(slot, t) for t in tokens])[-1]

    def truncate(self, slot: int, length: int) -> None:
        self.cache.truncate(slot, length)
