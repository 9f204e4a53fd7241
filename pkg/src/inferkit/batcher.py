"""Dynamic batching over engine slots.

The pool exposes two calls: :meth:`QueryPool.add_query` queues a prompt, and
:meth:`QueryPool.infer` runs one batched forward in which newly admitted
queries are prefilled and every already-running query decodes one token.
:class:`StaticBatcher` is the baseline that only admits between batches.
"""

from __future__ import annotations

import itertools
import threading
from collections import deque
from dataclasses import dataclass, field

from .engine import Engine
from .errors import InputError
from .sampler import Sampler, SamplerPolicy


@dataclass
class QueryState:
    qid: int
    prompt: list[int]
    policy: SamplerPolicy
    max_new_tokens: int
    generated: list[int] = field(default_factory=list)
    slot: int | None = None
    phase: str = "queued"
    sampler: Sampler | None = None
    encoder_input: list[int] | None = None

    @property
    def finished(self) -> bool:
        return self.phase == "finished"


class QueryPool:
    def __init__(self, engine: Engine, capacity: int = 8, eos: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.engine = engine
        self.capacity = min(capacity, engine.cache.capacity)
        self.eos = eos
        self.queue: deque[QueryState] = deque()
        self.active: list[QueryState] = []
        self.done: dict[int, QueryState] = {}
        self._ids = itertools.count()
        self._lock = threading.Lock()
        self.step = 0

    def add_query(self, prompt, policy: SamplerPolicy | None = None, max_new_tokens: int = 16, encoder_input=None) -> int:
        prompt = [int(t) for t in prompt]
        spec = self.engine.spec
        if not prompt:
            raise InputError("prompt must not be empty")
        if len(prompt) + max_new_tokens > spec.max_context:
            raise InputError(
                f"prompt of {len(prompt)} tokens plus {max_new_tokens} new tokens exceeds max_context {spec.max_context}"
            )
        if max_new_tokens < 1:
            raise InputError("max_new_tokens must be at least 1")
        with self._lock:
            qid = next(self._ids)
            self.queue.append(QueryState(qid, prompt, policy or SamplerPolicy(), max_new_tokens, encoder_input=encoder_input))
        return qid

    def __len__(self):
        return len(self.queue) + len(self.active)

    def _admit(self) -> list[QueryState]:
        admitted = []
        with self._lock:
            while self.queue and len(self.active) < self.capacity:
                q = self.queue.popleft()
                q.slot = self.engine.open_slot(q.encoder_input)
                q.sampler = Sampler(q.policy, self.engine.spec.vocab_size, q.prompt, stream=q.qid)
                q.phase = "prefill"
                self.active.append(q)
                admitted.append(q)
        return admitted

    def _finish(self, q: QueryState) -> None:
        q.phase = "finished"
        self.engine.close_slot(q.slot)
        self.done[q.qid] = q

    def infer(self) -> list[tuple[int, int]]:
        """One step: admit, run a single batched forward, sample one token each."""
        self._admit()
        self.step += 1
        if not self.active:
            return []
        rows, last_row = [], {}
        for q in self.active:
            feed = q.prompt if q.phase == "prefill" else q.generated[-1:]
            rows.extend((q.slot, t) for t in feed)
            last_row[q.qid] = len(rows) - 1
        logits = self.engine.forward(rows)
        out = []
        for q in list(self.active):
            tok = q.sampler.choose(logits[last_row[q.qid]])
            q.generated.append(tok)
            q.phase = "decoding"
            out.append((q.qid, tok))
            if len(q.generated) >= q.max_new_tokens or (self.eos is not None and tok == self.eos):
                self.active.remove(q)
                self._finish(q)
        return out

    def drain(self) -> dict[int, list[int]]:
        while len(self):
            self.infer()
        return {qid: list(q.generated) for qid, q in sorted(self.done.items())}


class StaticBatcher(QueryPool):
    """Baseline: queued queries wait until the whole running batch is done."""

    def _admit(self) -> list[QueryState]:
        if self.active:
            return []
        return super()._admit()


def sequential_decode(engine: Engine, prompt, policy: SamplerPolicy | None, max_new_tokens: int,
                      eos: int | None = None, stream: int = 0, encoder_input=None) -> list[int]:
    """Decode one query alone through the engine, no pool involved."""
    policy = policy or SamplerPolicy()
    slot = engine.open_slot(encoder_input)
    try:
        sampler = Sampler(policy, engine.spec.vocab_size, prompt, stream=stream)
        logits = engine.prefill(slot, prompt)
        out = []
        while True:
            tok = sampler.choose(logits)
            out.append(tok)
            if len(out) >= max_new_tokens or (eos is not None and tok == eos):
                return out
            logits = engine.forward_step([(slot, tok)])[0]
    finally:
        engine.close_slot(slot)


@dataclass
class Arrival:
    step: int
    prompt: str
    max_new_tokens: int | None = None


def parse_arrivals(text: str) -> list[Arrival]:
    """Lines of ``arrival_step<TAB>prompt[<TAB>max_new_tokens]``; ``#`` starts a comment."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise InputError(f"line {lineno}: expected 'step<TAB>prompt[<TAB>max_new_tokens]'")
        try:
            step = int(parts[0])
            limit = int(parts[2]) if len(parts) == 3 else None
        except ValueError:
            raise InputError(f"line {lineno}: arrival step and token limit must be integers") from None
        if step < 1:
            raise InputError(f"line {lineno}: arrival steps start at 1")
        out.append(Arrival(step, parts[1], limit))
    return out


def run_schedule(pool: QueryPool, arrivals, encode, default_max: int,
                 policy: SamplerPolicy | None = None, n_steps: int | None = None):
    """Feed arrivals into ``pool`` by step; returns ``[(step, [(qid, token), ...])]``.

    Runs until every query has finished, or for ``n_steps`` steps.
    """
    pending = deque(sorted(arrivals, key=lambda a: a.step))
    log, step = [], 0
    while pending or len(pool):
        step += 1
        if n_steps is not None and step > n_steps:
            break
        while pending and pending[0].step <= step:
            a = pending.popleft()
            pool.add_query(encode(a.prompt), max_new_tokens=a.max_new_tokens or default_max, policy=policy)
        log.append((step, pool.infer()))
    return log

