"""Speculative sampling with a cheap draft and the served (target) model.

The draft proposes ``K`` tokens autoregressively; the target scores all
``K + 1`` positions in one forward.  Each draft token is accepted with
probability ``min(1, target/draft)``; the first rejection is replaced by a
draw from the normalized residual ``(target - draft)+``.  If every draft
token survives, one extra token is drawn from the target.

Two rng streams keep runs reproducible: the draft stream drives proposals
and the extra token, the accept stream drives the uniforms and residual
draws.  With ``draft == target`` every proposal is accepted and the output
equals plain sampling from the target with the draft stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Model
from .errors import ContextOverflowError, InputError
from .sampler import AntiLm, sample_from_set, top_k_set, top_p_set
from .tensorcore import softmax


class NgramDraft:
    """n-gram model fitted on the prefix itself (add-``smoothing``)."""

    def __init__(self, vocab_size: int, order: int = 2, smoothing: float = 0.5):
        self.vocab_size = vocab_size
        self.order = order
        self.smoothing = smoothing

    def distribution(self, prefix) -> np.ndarray:
        return AntiLm(self.vocab_size, self.order, self.smoothing).extend(prefix).probs()


class ModelDistribution:
    """Next-token distributions of an engine model, memoized by prefix."""

    def __init__(self, model: Model, temperature: float = 1.0):
        self.model = model
        self.vocab_size = model.spec.vocab_size
        self.temperature = temperature
        self._memo: dict[tuple[int, ...], np.ndarray] = {}
        self.forwards = 0

    def distributions(self, prefix, continuation=()) -> list[np.ndarray]:
        """Distributions after ``prefix`` and after each extension by ``continuation``."""
        seq = tuple(int(t) for t in prefix) + tuple(int(t) for t in continuation)
        keys = [seq[: len(prefix) + i] for i in range(len(continuation) + 1)]
        if any(k not in self._memo for k in keys):
            if len(seq) > self.model.spec.max_context:
                raise ContextOverflowError("sequence longer than max_context")
            logits = self.model.forward_full(list(seq))
            self.forwards += 1
            for pos in range(len(prefix) - 1, len(seq)):
                self._memo.setdefault(seq[: pos + 1], softmax(np.asarray(logits[pos], np.float64) / self.temperature))
        return [self._memo[k] for k in keys]

    def distribution(self, prefix) -> np.ndarray:
        return self.distributions(prefix)[0]


class FixedDistribution:
    """Prefix-independent distribution (handy for checks and toy drafts)."""

    def __init__(self, probs):
        p = np.asarray(probs, dtype=np.float64)
        self.probs = p / p.sum()
        self.vocab_size = len(p)

    def distribution(self, prefix) -> np.ndarray:
        return self.probs


def _distributions(target, prefix, continuation):
    if hasattr(target, "distributions"):
        return target.distributions(prefix, continuation)
    seq = list(prefix)
    out = []
    for tok in list(continuation) + [None]:
        out.append(target.distribution(seq))
        if tok is not None:
            seq.append(tok)
    return out


@dataclass(frozen=True)
class SpecConfig:
    lookahead: int = 4
    acceptance: str = "strict"
    pool_k: int | None = None
    pool_p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lookahead < 1:
            raise ValueError("lookahead must be at least 1")
        if self.acceptance not in ("strict", "top_sampling"):
            raise ValueError("acceptance is 'strict' or 'top_sampling'")
        if self.acceptance == "top_sampling" and (self.pool_k is None) == (self.pool_p is None):
            raise ValueError("top_sampling acceptance needs exactly one of pool_k / pool_p")

    def pool(self, target_dist) -> np.ndarray:
        if self.pool_k is not None:
            return top_k_set(target_dist, self.pool_k)
        return top_p_set(target_dist, self.pool_p)


@dataclass
class StepOutcome:
    accepted: bool
    token: int
    used_uniform: bool


@dataclass
class AcceptanceStats:
    proposed: int = 0
    accepted: int = 0
    iterations: int = 0

    @property
    def rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def residual_distribution(target_dist, draft_dist) -> np.ndarray | None:
    """Normalized ``(target - draft)+``, or None when it is identically zero."""
    r = np.maximum(np.asarray(target_dist, np.float64) - np.asarray(draft_dist, np.float64), 0.0)
    total = r.sum()
    return r / total if total > 0 else None


def propose(draft, prefix, k: int, rng) -> tuple[list[int], list[np.ndarray]]:
    if not len(prefix):
        raise InputError("speculation needs a non-empty prefix")
    seq, tokens, dists = list(prefix), [], []
    for _ in range(k):
        d = draft.distribution(seq)
        tok = sample_from_set(d, np.arange(len(d)), rng)
        tokens.append(tok)
        dists.append(d)
        seq.append(tok)
    return tokens, dists


def accept_step(target_dist, draft_dist, token: int, cfg: SpecConfig, rng, uniform: float | None = None) -> StepOutcome:
    """Accept or replace one draft token.

    ``uniform`` injects the accept draw (otherwise taken from ``rng``); the
    residual draw on rejection always comes from ``rng``.
    """
    target_dist = np.asarray(target_dist, np.float64)
    draft_dist = np.asarray(draft_dist, np.float64)
    if cfg.acceptance == "top_sampling" and token in set(cfg.pool(target_dist).tolist()):
        return StepOutcome(True, token, False)
    u = rng.random() if uniform is None else uniform
    q = draft_dist[token]
    ratio = target_dist[token] / q if q > 0 else math.inf
    if u < min(1.0, ratio):
        return StepOutcome(True, token, True)
    residual = residual_distribution(target_dist, draft_dist)
    if residual is None:
        return StepOutcome(True, token, True)
    return StepOutcome(False, sample_from_set(residual, np.arange(len(residual)), rng), True)


def speculative_generate(target, draft, prefix, n_total: int, cfg: SpecConfig) -> tuple[list[int], AcceptanceStats]:
    """Extend ``prefix`` to ``n_total`` tokens; returns the sequence and acceptance counts."""
    if n_total <= len(prefix):
        raise InputError("target length must exceed the prefix length")
    draft_rng = np.random.default_rng([cfg.seed, 1])
    accept_rng = np.random.default_rng([cfg.seed, 2])
    seq = [int(t) for t in prefix]
    stats = AcceptanceStats()
    while len(seq) < n_total:
        stats.iterations += 1
        k = min(cfg.lookahead, n_total - len(seq) - 1)
        drafts, ddists = propose(draft, seq, k, draft_rng) if k else ([], [])
        tdists = _distributions(target, seq, drafts)
        for i, tok in enumerate(drafts):
            stats.proposed += 1
            out = accept_step(tdists[i], ddists[i], tok, cfg, accept_rng)
            seq.append(out.token)
            if not out.accepted:
                break
            stats.accepted += 1
        else:
            last = tdists[len(drafts)]
            seq.append(sample_from_set(last, np.arange(len(last)), draft_rng))
    return seq, stats


def sample_sequence(model, prefix, n_total: int, rng) -> list[int]:
    """Plain autoregressive sampling from ``model``'s distributions."""
    seq = [int(t) for t in prefix]
    while len(seq) < n_total:
        d = model.distribution(seq)
        seq.append(sample_from_set(d, np.arange(len(d)), rng))
    return seq


def estimate_speedup(r: float, k: int, t_draft: float, t_target: float, n_tokens: int) -> float:
    """Expected generation time ``N / (r (K+1)) * (K t_draft + t_target)``."""
    if not 0 <= r <= 1 or k < 1 or t_draft < 0 or t_target < 0:
        raise ValueError("need 0 <= r <= 1, K >= 1 and non-negative times")
    if r == 0:
        return math.inf
    return n_tokens / (r * (k + 1)) * (k * t_draft + t_target)
