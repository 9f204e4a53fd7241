"""Byte-level BPE tokenizer with plain-text vocab and merges files.

Vocab file: one token per line, id = zero-based line number.  Token bytes are
written with Python bytes escapes (``\\n``, ``\\xNN``, ...), and a space is
written as ``\\x20`` so lines never carry significant whitespace.  The
special tokens are the literal lines ``<|bos|>``, ``<|eos|>`` and
``<|pad|>``.  All 256 single-byte tokens must be present; they are the
fallback alphabet that makes encoding total.

Merges file: one merge per line, ``left right`` in the same escaping, in
rank order (first line merges first).
"""

from __future__ import annotations

import codecs
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

SPECIALS = ("<|bos|>", "<|eos|>", "<|pad|>")


def escape_token(tok: bytes) -> str:
    return codecs.escape_encode(tok)[0].decode("ascii").replace(" ", "\\x20")


def unescape_token(text: str) -> bytes:
    return codecs.escape_decode(text.encode("ascii"))[0]


@dataclass
class Vocab:
    tokens: list[bytes]
    merges: list[tuple[int, int]]
    specials: dict[str, int]
    _byte_ids: list[int] = field(init=False, repr=False)
    _ranks: dict[tuple[int, int], tuple[int, int]] = field(init=False, repr=False)

    def __post_init__(self):
        lookup = {}
        for i, t in enumerate(self.tokens):
            if i not in self.specials.values():
                lookup.setdefault(t, i)
        missing = [b for b in range(256) if bytes([b]) not in lookup]
        if missing:
            raise ValueError(f"vocab lacks byte-fallback tokens for {len(missing)} byte values")
        if "eos" not in self.specials:
            raise ValueError("vocab needs an <|eos|> token")
        self._byte_ids = [lookup[bytes([b])] for b in range(256)]
        self._ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            merged = self.tokens[a] + self.tokens[b]
            if merged not in lookup:
                raise ValueError(f"merge {rank} produces a token missing from the vocab")
            self._ranks.setdefault((a, b), (rank, lookup[merged]))

    def __len__(self):
        return len(self.tokens)

    @property
    def bos(self) -> int | None:
        return self.specials.get("bos")

    @property
    def eos(self) -> int:
        return self.specials["eos"]

    @property
    def pad(self) -> int | None:
        return self.specials.get("pad")


def byte_vocab() -> Vocab:
    """The 256 byte tokens followed by bos/eos/pad; no merges."""
    tokens = [bytes([b]) for b in range(256)] + [s.encode() for s in SPECIALS]
    return Vocab(tokens, [], {"bos": 256, "eos": 257, "pad": 258})


def train_bpe(corpus: str, n_merges: int) -> Vocab:
    """Greedy BPE training on a small corpus (most frequent pair first, ties by ids)."""
    vocab = byte_vocab()
    tokens = list(vocab.tokens)
    merges: list[tuple[int, int]] = []
    seq = [vocab._byte_ids[b] for b in corpus.encode("utf-8")]
    for _ in range(n_merges):
        pairs = Counter(zip(seq, seq[1:]))
        if not pairs:
            break
        (a, b), _ = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))
        new_id = len(tokens)
        tokens.append(tokens[a] + tokens[b])
        merges.append((a, b))
        seq = _merge_pair(seq, a, b, new_id)
    return Vocab(tokens, merges, dict(vocab.specials))


def _merge_pair(seq: list[int], a: int, b: int, new_id: int) -> list[int]:
    out, i = [], 0
    while i < len(seq):
        if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(seq[i])
            i += 1
    return out


def bpe_encode(vocab: Vocab, text: str, *, apply_merges: bool = True) -> list[int]:
    """Encode text: bytes first, then merges applied lowest rank first."""
    seq = [vocab._byte_ids[b] for b in text.encode("utf-8")]
    if not apply_merges:
        return seq
    while len(seq) > 1:
        best = None
        for pair in zip(seq, seq[1:]):
            hit = vocab._ranks.get(pair)
            if hit is not None and (best is None or hit[0] < best[1][0]):
                best = (pair, hit)
        if best is None:
            break
        (a, b), (_, new_id) = best
        seq = _merge_pair(seq, a, b, new_id)
    return seq


def bpe_decode(vocab: Vocab, ids) -> str:
    special = set(vocab.specials.values())
    return b"".join(vocab.tokens[i] for i in ids if i not in special).decode("utf-8", errors="replace")


def save_vocab(vocab: Vocab, vocab_path, merges_path=None) -> None:
    names = {v: k for k, v in vocab.specials.items()}
    lines = [f"<|{names[i]}|>" if i in names else escape_token(t) for i, t in enumerate(vocab.tokens)]
    Path(vocab_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if merges_path is not None:
        ml = [f"{escape_token(vocab.tokens[a])} {escape_token(vocab.tokens[b])}" for a, b in vocab.merges]
        Path(merges_path).write_text("\n".join(ml) + ("\n" if ml else ""), encoding="utf-8")


def load_vocab(vocab_path, merges_path=None) -> Vocab:
    tokens: list[bytes] = []
    specials: dict[str, int] = {}
    for i, line in enumerate(Path(vocab_path).read_text(encoding="utf-8").split("\n")[:-1]):
        if line in SPECIALS:
            specials[line[2:-2]] = i
            tokens.append(line.encode())
        else:
            tokens.append(unescape_token(line))
    merges: list[tuple[int, int]] = []
    if merges_path is not None:
        lookup = {}
        for i, t in enumerate(tokens):
            if i not in specials.values():
                lookup.setdefault(t, i)
        for line in Path(merges_path).read_text(encoding="utf-8").splitlines():
            if line:
                left, right = line.split(" ")
                merges.append((lookup[unescape_token(left)], lookup[unescape_token(right)]))
    return Vocab(tokens, merges, specials)


class Tokenizer:
    """Binds a vocab to a tokenization algorithm (``bpe`` or ``char``)."""

    def __init__(self, vocab: Vocab, algorithm: str = "bpe"):
        self.vocab = vocab
        self.algorithm = algorithm

    def encode(self, text: str) -> list[int]:
        return bpe_encode(self.vocab, text, apply_merges=self.algorithm == "bpe")

    def decode(self, ids) -> str:
        return bpe_decode(self.vocab, ids)

    @classmethod
    def for_spec(cls, spec) -> "Tokenizer":
        if spec.tokenizer_file == "builtin:bytes":
            vocab = byte_vocab()
        else:
            merges = spec.resolve_path(spec.tokenizer_merges_file) if spec.tokenizer_merges_file else None
            vocab = load_vocab(spec.resolve_path(spec.tokenizer_file), merges)
        return cls(vocab, spec.tokenization_algorithm)
