"""Independent reference implementations used as test oracles.

They share no code with the package beyond the fixed-order matmul (so the
attention oracle isolates head grouping, not accumulation order).
"""

from __future__ import annotations

import math

import numpy as np


# -- quantization ----------------------------------------------------------


def ref_levels(codec: str) -> int:
    return 10 if codec == "Q3H" else (1 << int(codec[1:])) - 1


def ref_quantize(weights, codec: str):
    """Per-weight digits computed with Python scalars, plus fp16 bounds."""
    lo = float(np.float16(min(weights)))
    hi = float(np.float16(max(weights)))
    levels = ref_levels(codec)
    if hi == lo:
        return lo, hi, [0] * len(weights)
    digits = []
    for w in weights:
        x = (float(w) - lo) / (hi - lo) * levels
        d = math.floor(abs(x) + 0.5) * (1 if x >= 0 else -1)
        digits.append(min(max(d, 0), levels))
    return lo, hi, digits


def ref_dequantize(lo: float, hi: float, digits, codec: str) -> np.ndarray:
    levels = ref_levels(codec)
    return np.array([d / levels * (hi - lo) + lo for d in digits], dtype=np.float64).astype(np.float32)


def ref_pack(values, nbits: int) -> bytes:
    """Little-endian bit order: value i occupies bits [i*nbits, (i+1)*nbits)."""
    acc = 0
    for i, v in enumerate(values):
        acc |= int(v) << (i * nbits)
    nbytes = (len(values) * nbits + 7) // 8
    return acc.to_bytes(nbytes, "little")


def ref_codes(digits, codec: str):
    if codec == "Q3H":
        return [digits[i] * 11 + digits[i + 1] for i in range(0, len(digits), 2)], 7
    return list(digits), int(codec[1:])


# -- attention -------------------------------------------------------------


def _rms(v, g):
    v = v.astype(np.float64)
    return (v / math.sqrt(float(np.dot(v, v)) / len(v) + 1e-5) * g).astype(np.float32)


def _rope_pairs(vec, pos):
    out = vec.astype(np.float64).copy()
    hd = len(vec)
    for i in range(hd // 2):
        theta = pos * 10000.0 ** (-2 * i / hd)
        a, b = out[2 * i], out[2 * i + 1]
        out[2 * i] = a * math.cos(theta) - b * math.sin(theta)
        out[2 * i + 1] = a * math.sin(theta) + b * math.cos(theta)
    return out.astype(np.float32)


def mha_logits(weights: dict, tokens, heads: int, layers: int, matmul) -> np.ndarray:
    """Decoder-only rms/silu/rope forward with one K/V per head and explicit loops.

    ``weights`` holds dense arrays; ``matmul`` is the fixed-order product.
    """
    emb = weights["embed.weight"]
    x = np.stack([emb[t] for t in tokens]).astype(np.float32)
    n, d = x.shape
    hd = d // heads
    for layer in range(layers):
        p = f"layers.{layer}."
        xn = np.stack([_rms(r, weights[p + "attn_norm.weight"]) for r in x])
        q = matmul(xn, weights[p + "attn.q.weight"])
        k = matmul(xn, weights[p + "attn.k.weight"])
        v = matmul(xn, weights[p + "attn.v.weight"])
        ctx = np.zeros((n, heads * hd), dtype=np.float32)
        for h in range(heads):
            sl = slice(h * hd, (h + 1) * hd)
            qh = np.stack([_rope_pairs(q[t, sl], t) for t in range(n)]).astype(np.float64)
            kh = np.stack([_rope_pairs(k[t, sl], t) for t in range(n)]).astype(np.float64)
            vh = v[:, sl].astype(np.float64)
            for t in range(n):
                s = np.array([np.dot(qh[t], kh[j]) / math.sqrt(hd) for j in range(t + 1)])
                w = np.exp(s - s.max())
                w /= w.sum()
                ctx[t, sl] = (w[:, None] * vh[: t + 1]).sum(axis=0)
        x = x + matmul(ctx, weights[p + "attn.o.weight"])
        xn = np.stack([_rms(r, weights[p + "ffn_norm.weight"]) for r in x])
        up = matmul(xn, weights[p + "ffn.up.weight"]).astype(np.float64)
        act = (up / (1.0 + np.exp(-up))).astype(np.float32)
        x = x + matmul(act, weights[p + "ffn.down.weight"])
    xn = np.stack([_rms(r, weights["final_norm.weight"]) for r in x])
    return matmul(xn, weights["lm_head.weight"])


# -- sampling --------------------------------------------------------------


def brute_top_p(probs, p):
    """Smallest prefix of the (desc prob, asc id) order reaching mass p."""
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    order = [i for i in order if probs[i] > 0]
    total = 0.0
    for n, i in enumerate(order, 1):
        total += probs[i]
        if total >= p:
            return sorted(order[:n])
    return sorted(order)


def brute_tfs(probs, z):
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    sp = [probs[i] for i in order]
    d2 = [abs(sp[i] - 2 * sp[i + 1] + sp[i + 2]) for i in range(len(sp) - 2)]
    total = sum(d2)
    cum = 0.0
    for j, w in enumerate(d2):
        cum += w / total
        if cum >= z:
            return sorted(order[: j + 1])
    return sorted(order[: len(d2) + 1])
