"""Byte-level corpora and batching.

Tokens are bytes 0..255 plus two specials (``SEP`` = 256, ``BOS`` = 257), so
``VOCAB_SIZE`` is 258.

Corpus file format (text, UTF-8)::

    # {"kind": ..., "seed": ..., "size": ..., "vocab_size": 258}
    61 62 63 100 61 62 63
    ...

one sequence per line, tokens as space-separated lowercase hex.
"""
from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

SEP = 256
BOS = 257
VOCAB_SIZE = 258
LETTERS = tuple(range(97, 123))

# Small built-in source for the Markov generator.
BUILTIN_TEXT = (
    "the river runs past the mill and the mill turns the stone. "
    "a miller grinds the grain and sells the flour in the town. "
    "in winter the river freezes and the wheel stands still, "
    "so the miller mends nets and counts the sacks in the loft. "
    "when the ice breaks the water comes fast and loud, "
    "and the wheel turns again from morning until night. "
    "children stand on the bridge to watch the foam, "
    "and the old dog sleeps by the door in the sun. "
)


@dataclass
class Corpus:
    sequences: list = field(default_factory=list)
    kind: str = "custom"
    seed: int | None = None
    size: int = 0
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in self.sequences]
        for s in self.sequences:
            if s.ndim != 1:
                raise DataError("corpus sequences must be 1-D")
            if s.size and (s.min() < 0 or s.max() >= self.vocab_size):
                raise DataError(f"token outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_tokens(self) -> int:
        return int(sum(s.size for s in self.sequences))

    def descriptor(self) -> dict:
        return {"kind": self.kind, "seed": self.seed, "size": self.size, "vocab_size": self.vocab_size}

    def equals(self, other: "Corpus") -> bool:
        return (self.descriptor() == other.descriptor() and len(self) == len(other)
                and all(np.array_equal(a, b) for a, b in zip(self.sequences, other.sequences)))


def copy_sequence(prefix) -> np.ndarray:
    prefix = list(prefix)
    return np.array(prefix + [SEP] + prefix, dtype=np.int64)


def gen_copy_task(seed: int, n_sequences: int, length: int, alphabet=LETTERS) -> Corpus:
    """Sequences ``[prefix, SEP, prefix]`` of total ``length`` (odd, >= 3)."""
    if length < 3 or length % 2 == 0:
        raise ConfigError(f"copy task length must be odd and >= 3, got {length}")
    if n_sequences < 0:
        raise ConfigError("n_sequences must be >= 0")
    rng = np.random.default_rng(seed)
    alphabet = np.asarray(alphabet, dtype=np.int64)
    k = (length - 1) // 2
    seqs = [copy_sequence(rng.choice(alphabet, k)) for _ in range(n_sequences)]
    return Corpus(seqs, kind="copy", seed=seed, size=n_sequences)


def gen_markov_text(seed: int, order: int, n_tokens: int, source: str | bytes = BUILTIN_TEXT) -> Corpus:
    """Byte-level order-``order`` Markov chain fitted to ``source``; unseen contexts back off."""
    if order < 0:
        raise ConfigError("markov order must be >= 0")
    src = source.encode("utf-8") if isinstance(source, str) else bytes(source)
    if len(src) <= order:
        raise ConfigError("markov source shorter than the model order")
    tables = []
    for k in range(order + 1):
        counts: dict[bytes, Counter] = defaultdict(Counter)
        for i in range(k, len(src)):
            counts[src[i - k:i]][src[i]] += 1
        tables.append({ctx: (np.array(sorted(c)), np.array([c[b] for b in sorted(c)], dtype=float))
                       for ctx, c in counts.items()})
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(src) - order + 1))
    out = bytearray(src[start:start + order])[:n_tokens]
    while len(out) < n_tokens:
        for k in range(order, -1, -1):
            ctx = bytes(out[len(out) - k:]) if k else b""
            if ctx in tables[k]:
                symbols, weights = tables[k][ctx]
                break
        out.append(int(symbols[rng.choice(len(symbols), p=weights / weights.sum())]))
    return Corpus([np.frombuffer(bytes(out), dtype=np.uint8)], kind=f"markov{order}", seed=seed, size=n_tokens)


def load_text_file(path) -> Corpus:
    """Whole file as one byte sequence; an empty file gives an empty corpus."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read corpus file {path}: {e.strerror or e}") from e
    seqs = [np.frombuffer(raw, dtype=np.uint8)] if raw else []
    return Corpus(seqs, kind="file", seed=None, size=len(raw))


def save_corpus(corpus: Corpus, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# " + json.dumps(corpus.descriptor(), sort_keys=True)]
    lines += [" ".join(format(int(t), "x") for t in s) for s in corpus.sequences]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_corpus(path) -> Corpus:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise DataError(f"cannot read corpus file {path}: {e.strerror or e}") from e
    if not lines or not lines[0].startswith("# "):
        raise DataError(f"{path}: missing corpus header")
    desc = json.loads(lines[0][2:])
    try:
        seqs = [[int(t, 16) for t in line.split()] for line in lines[1:]]
    except ValueError as e:
        raise DataError(f"{path}: malformed token line") from e
    return Corpus(seqs, **desc)


def windows(corpus: Corpus, seq_len: int) -> np.ndarray:
    """Non-overlapping ``seq_len + 1`` windows; short sequences and tails are skipped."""
    span = seq_len + 1
    out = [s[i:i + span] for s in corpus.sequences for i in range(0, s.size - span + 1, span)]
    return np.stack(out) if out else np.zeros((0, span), dtype=np.int64)


def n_batches(corpus: Corpus, batch: int, seq_len: int) -> int:
    return windows(corpus, seq_len).shape[0] // batch


def batches(corpus: Corpus, batch: int, seq_len: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled ``(inputs, targets)`` blocks of shape ``[batch, seq_len]``; the remainder is dropped."""
    if batch < 1 or seq_len < 1:
        raise ConfigError("batch and seq_len must be >= 1")
    w = windows(corpus, seq_len)
    n = w.shape[0] // batch
    if n == 0:
        raise DataError(f"corpus yields no full batch ({w.shape[0]} windows of {seq_len + 1} tokens, batch {batch})")
    order = np.random.default_rng(seed).permutation(w.shape[0])

    def gen():
        for b in range(n):
            block = w[order[b * batch:(b + 1) * batch]]
            yield block[:, :-1], block[:, 1:]

    # validated eagerly, iterated lazily
    return gen()
