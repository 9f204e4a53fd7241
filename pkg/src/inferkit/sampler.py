"""Decoding strategies as candidate-set selection followed by a shared draw.

Every candidate-set function takes a normalized probability vector and
returns token ids (sorted ascending).  Ties always go to the lower id.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace

import numpy as np

from .tensorcore import softmax

STRATEGIES = ("greedy", "top_k", "top_p", "temperature", "fsd", "fsd_random", "typical", "mirostat", "min_p", "tfs")


def _order(probs: np.ndarray) -> np.ndarray:
    """Ids by descending probability, lower id first on ties."""
    return np.argsort(-np.asarray(probs, dtype=np.float64), kind="stable")


def _prefix_reaching(sorted_ids, probs, mass: float) -> np.ndarray:
    cum = np.cumsum(probs[sorted_ids])
    n = int(np.searchsorted(cum, mass, side="left")) + 1
    return np.sort(sorted_ids[: min(max(n, 1), len(sorted_ids))])


def temperature_scale(logits, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(logits, dtype=np.float64) / tau)


def top_k_set(probs, k: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    k = max(1, min(int(k), len(probs)))
    return np.sort(_order(probs)[:k])


def top_p_set(probs, p: float) -> np.ndarray:
    """Smallest most-probable prefix whose mass reaches ``p``."""
    probs = np.asarray(probs, dtype=np.float64)
    order = _order(probs)
    order = order[probs[order] > 0] if np.any(probs > 0) else order[:1]
    return _prefix_reaching(order, probs, p)


def typical_set(probs, p: float) -> np.ndarray:
    """Ids closest to the expected information content, covering mass ``p``."""
    probs = np.asarray(probs, dtype=np.float64)
    nz = probs > 0
    logp = np.where(nz, np.log(np.where(nz, probs, 1.0)), -np.inf)
    entropy = -np.sum(probs[nz] * logp[nz])
    dist = np.abs(entropy + logp)
    order = np.argsort(dist, kind="stable")
    order = order[nz[order]]
    return _prefix_reaching(order, probs, p)


def min_p_set(probs, alpha: float) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    return np.flatnonzero(probs >= alpha * probs.max())


def tfs_set(probs, z: float) -> np.ndarray:
    """Tail-free truncation from the sorted curve's normalized |second difference|.

    Token ``j`` of the sorted list is kept while the cumulative weight of the
    second differences *before* it is still below ``z``; the first token is
    always kept.  ``z >= 1`` or fewer than 3 tokens keeps everything.
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = len(probs)
    if n < 3 or z >= 1.0:
        return np.arange(n)
    order = _order(probs)
    sp = probs[order]
    d2 = np.abs(np.diff(sp, n=2))
    total = d2.sum()
    if total == 0:
        return np.arange(n)
    cum = np.cumsum(d2 / total)
    j = int(np.searchsorted(cum, z, side="left"))
    return np.sort(order[: min(j + 1, n)])


def sample_from_set(probs, ids, rng: np.random.Generator | None, greedy: bool = False) -> int:
    """Inverse-CDF draw over ``probs`` renormalized on ``ids``."""
    ids = np.sort(np.asarray(ids, dtype=np.int64))
    if len(ids) == 0:
        raise ValueError("empty candidate set")
    w = np.asarray(probs, dtype=np.float64)[ids]
    if greedy or rng is None:
        return int(ids[int(np.argmax(w))])
    if w.sum() <= 0:
        w = np.ones_like(w)
    cdf = np.cumsum(w / w.sum())
    u = rng.random()
    i = int(np.searchsorted(cdf, u, side="right"))
    return int(ids[min(i, len(ids) - 1)])


# --------------------------------------------------------------------------
# frustratingly simple decoding


class AntiLm:
    """n-gram model over the current prefix with add-``smoothing`` estimates."""

    def __init__(self, vocab_size: int, order: int = 2, smoothing: float = 0.5):
        if order < 1:
            raise ValueError("n-gram order must be at least 1")
        self.vocab_size = vocab_size
        self.order = order
        self.smoothing = smoothing
        self.counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
        self.history: list[int] = []

    def append(self, token: int) -> None:
        self.history.append(int(token))
        ctx_len = self.order - 1
        if len(self.history) > ctx_len:
            ctx = tuple(self.history[len(self.history) - 1 - ctx_len : -1])
            self.counts[ctx][int(token)] += 1

    def extend(self, tokens) -> "AntiLm":
        for t in tokens:
            self.append(t)
        return self

    def context(self) -> tuple[int, ...]:
        n = self.order - 1
        return tuple(self.history[len(self.history) - n :]) if n else ()

    def probs(self) -> np.ndarray:
        c = self.counts.get(self.context(), Counter())
        out = np.full(self.vocab_size, self.smoothing, dtype=np.float64)
        for tok, n in c.items():
            out[tok] += n
        return out / out.sum()


def fsd_scores(lm_probs, anti_probs, alpha: float, k: int):
    """Top-k ids of the LM and their contrastive scores ``(1-α)P - αP_anti``."""
    lm_probs = np.asarray(lm_probs, dtype=np.float64)
    ids = top_k_set(lm_probs, k)
    scores = (1.0 - alpha) * lm_probs[ids] - alpha * np.asarray(anti_probs, dtype=np.float64)[ids]
    return ids, scores


def fsd_score(lm_probs, anti_probs, alpha: float, k: int) -> int:
    ids, scores = fsd_scores(lm_probs, anti_probs, alpha, k)
    return int(ids[int(np.argmax(scores))])


def fsd_random(lm_probs, anti_probs, alpha: float, k: int, step: int, t_random: int, rng) -> int:
    """Sample from shifted FSD scores for ``step <= t_random``, else plain FSD."""
    if step > t_random:
        return fsd_score(lm_probs, anti_probs, alpha, k)
    ids, scores = fsd_scores(lm_probs, anti_probs, alpha, k)
    w = scores - scores.min()
    if w.sum() <= 0:
        w = np.ones_like(w)
    full = np.zeros(len(lm_probs))
    full[ids] = w
    return sample_from_set(full, ids, rng)


# --------------------------------------------------------------------------
# mirostat


@dataclass
class MirostatState:
    target: float
    learning_rate: float
    mu: float | None = None
    surprises: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.mu is None:
            self.mu = 2.0 * self.target


def estimate_zipf_exponent(sorted_probs, m: int = 100) -> float:
    """Least-squares Zipf exponent from the top ``m`` probabilities (descending)."""
    p = np.asarray(sorted_probs, dtype=np.float64)[:m]
    p = p[p > 0]
    if len(p) < 2:
        return 0.0
    i = np.arange(len(p) - 1)
    t = np.log((i + 2) / (i + 1))
    b = np.log(p[:-1] / p[1:])
    return float(np.sum(t * b) / np.sum(t * t))


def mirostat_k(s: float, mu: float, n: int) -> int:
    if s <= 0:
        return n
    eps = s - 1.0
    if abs(eps) < 1e-9:
        base = math.exp(mu) / math.log(n)
    else:
        base = eps * math.exp(mu) / (1.0 - n ** (-eps))
    if base <= 0:
        return n
    k = math.exp(math.log(base) / s)
    return int(max(1, min(n, round(k)))) if math.isfinite(k) else n


def mirostat_step(logits, state: MirostatState, rng) -> tuple[int, MirostatState]:
    probs = softmax(logits)
    order = _order(probs)
    sp = probs[order]
    n = len(probs)
    s = estimate_zipf_exponent(sp, min(100, n))
    k = mirostat_k(s, state.mu, n)
    ids = np.sort(order[:k])
    tok = sample_from_set(probs, ids, rng)
    surprise = -math.log(probs[tok] / probs[ids].sum())
    state.mu -= state.learning_rate * (surprise - state.target)
    state.surprises.append(surprise)
    return tok, state


# --------------------------------------------------------------------------
# policy + per-query sampler


@dataclass(frozen=True)
class SamplerPolicy:
    strategy: str = "greedy"
    top_k: int = 40
    top_p: float = 0.9
    temperature: float = 1.0
    alpha: float = 0.5
    tfs_z: float = 0.95
    target_surprise: float = 3.0
    learning_rate: float = 0.1
    t_random: int = 0
    anti_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be at least 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.alpha < 0 or (self.strategy in ("fsd", "fsd_random") and self.alpha > 1):
            raise ValueError("alpha must lie in [0, 1] for fsd")
        if self.strategy == "min_p" and not 0 < self.alpha <= 1:
            raise ValueError("min_p needs 0 < alpha <= 1")
        if not 0 < self.tfs_z <= 1:
            raise ValueError("tfs_z must lie in (0, 1]")
        if self.target_surprise <= 0:
            raise ValueError("target surprise must be positive")

    _FIELDS = {
        "strategy": str, "top_k": int, "top_p": float, "temperature": float, "temp": float,
        "alpha": float, "tfs_z": float, "target_surprise": float, "mirostat_tau": float,
        "learning_rate": float, "mirostat_eta": float, "t_random": int, "anti_order": int, "seed": int,
    }
    _ALIASES = {"temp": "temperature", "mirostat_tau": "target_surprise", "mirostat_eta": "learning_rate"}

    @classmethod
    def from_mapping(cls, values: dict, base: "SamplerPolicy | None" = None) -> "SamplerPolicy":
        """Build from string values such as a spec's generation_config."""
        kw = {}
        for key, raw in values.items():
            if key not in cls._FIELDS:
                raise ValueError(f"unknown sampler setting {key!r}")
            kw[cls._ALIASES.get(key, key)] = cls._FIELDS[key](raw)
        return replace(base or cls(), **kw)


class Sampler:
    """Stateful token chooser for one query: rng, anti-LM, mirostat, step count."""

    def __init__(self, policy: SamplerPolicy, vocab_size: int, prefix=(), stream: int = 0):
        self.policy = policy
        self.rng = np.random.default_rng([policy.seed, stream])
        self.anti = AntiLm(vocab_size, policy.anti_order).extend(prefix)
        self.mirostat = MirostatState(policy.target_surprise, policy.learning_rate)
        self.step = 0

    def candidates(self, logits) -> tuple[np.ndarray, np.ndarray]:
        """Distribution and candidate ids a sampling strategy draws from."""
        pol = self.policy
        probs = temperature_scale(logits, pol.temperature)
        strat = pol.strategy
        if strat == "top_k":
            return probs, top_k_set(probs, pol.top_k)
        if strat == "top_p":
            return probs, top_p_set(probs, pol.top_p)
        if strat == "typical":
            return probs, typical_set(probs, pol.top_p)
        if strat == "min_p":
            return probs, min_p_set(probs, pol.alpha)
        if strat == "tfs":
            return probs, tfs_set(probs, pol.tfs_z)
        if strat == "greedy":
            return probs, np.array([int(_order(probs)[0])])
        return probs, np.flatnonzero(probs > 0)

    def choose(self, logits) -> int:
        pol = self.policy
        self.step += 1
        strat = pol.strategy
        if strat == "greedy":
            tok = int(_order(np.asarray(logits, dtype=np.float64))[0])
        elif strat in ("fsd", "fsd_random"):
            probs = softmax(logits)
            anti = self.anti.probs()
            if strat == "fsd":
                tok = fsd_score(probs, anti, pol.alpha, pol.top_k)
            else:
                tok = fsd_random(probs, anti, pol.alpha, pol.top_k, self.step, pol.t_random, self.rng)
        elif strat == "mirostat":
            tok, _ = mirostat_step(np.asarray(logits, dtype=np.float64) / pol.temperature, self.mirostat, self.rng)
        else:
            probs, ids = self.candidates(logits)
            tok = sample_from_set(probs, ids, self.rng)
        self.anti.append(tok)
        return tok
