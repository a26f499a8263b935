"""Vocabulary, synthetic corpus generation, and corpus/vocab file I/O.

Tokenization is plain whitespace splitting over a synthetic integer-ish
vocabulary; the corpus wire format is one tab-separated pair per line with a
sidecar vocab file listing one token per line in id order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PAD, BOS, EOS, MASK = 0, 1, 2, 3
SUPPORTED_K = (2, 3, 4)
BOS_K = {2: 4, 3: 5, 4: 6}
N_SPECIALS = 4 + len(SUPPORTED_K)  # 7

SPECIAL_TOKENS = ["[PAD]", "[BOS]", "[EOS]", "[MASK]"] + [
    f"[BOS_{k}]" for k in SUPPORTED_K
]

# Hash constants for the deterministic adjacent-swap rule (mapped-swap task).
_SWAP_MULT = 2654435761
_SWAP_MOD = 2**32


class DataError(ValueError):
    pass


@dataclass
class Vocabulary:
    """token <-> id table; ids 0..6 are reserved specials, regular tokens follow."""

    tokens: list[str]

    def __post_init__(self):
        if self.tokens[:N_SPECIALS] != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved special tokens")
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise DataError("duplicate token in vocabulary")

    @classmethod
    def synthetic(cls, vocab_size):
        """Vocabulary with `vocab_size - 7` regular tokens named w0, w1, ..."""
        if vocab_size < N_SPECIALS + 2:
            raise DataError(f"vocab_size must be at least {N_SPECIALS + 2}")
        return cls(SPECIAL_TOKENS + [f"w{i}" for i in range(vocab_size - N_SPECIALS)])

    def __len__(self):
        return len(self.tokens)

    @property
    def regular_ids(self):
        return range(N_SPECIALS, len(self.tokens))

    def encode(self, text):
        try:
            return [self._ids[t] for t in text.split()]
        except KeyError as e:
            raise DataError(f"unknown token {e.args[0]!r}") from None

    def decode(self, ids):
        return " ".join(self.tokens[i] for i in ids)

    def bos_k(self, k):
        if k not in BOS_K:
            raise DataError(f"unsupported chunk size k={k}")
        return BOS_K[k]


@dataclass
class SentencePair:
    source: list[int]
    target: list[int]

    def __post_init__(self):
        if not self.source or not self.target:
            raise DataError("source/target must be non-empty")
        if any(i < N_SPECIALS for i in self.source + self.target):
            raise DataError("special ids are not allowed inside a sentence pair")


@dataclass
class Corpus:
    pairs: list[SentencePair]
    vocab: Vocabulary

    def __post_init__(self):
        n = len(self.vocab)
        for p in self.pairs:
            if any(i >= n for i in p.source + p.target):
                raise DataError("token id out of vocabulary range")

    def __len__(self):
        return len(self.pairs)

    def __eq__(self, other):
        return (
            isinstance(other, Corpus)
            and self.vocab.tokens == other.vocab.tokens
            and self.pairs == other.pairs
        )


def truncate(seq, max_len):
    """Keep at most the first `max_len` tokens."""
    return seq[:max_len]


def _swap_fires(a, b, swap_prob):
    """Deterministic pseudo-random rule: swap the adjacent pair (a, b)?

    Keyed on the token pair itself so the target stays a deterministic function
    of the source (learnable), while firing on ~swap_prob of random pairs.
    """
    h = (a * _SWAP_MULT + b * 40503 + 12345) % _SWAP_MOD
    return h / _SWAP_MOD < swap_prob


def generate_synthetic(
    task,
    n_pairs,
    len_range,
    vocab_size,
    seed,
    swap_prob=0.3,
    mapping=None,
    max_len=200,
):
    """Synthetic parallel corpus for one of {copy, reverse, mapped-swap}.

    mapped-swap applies a seeded bijective token map, then swaps adjacent
    (non-overlapping) pairs where the deterministic hash rule fires with rate
    `swap_prob`. Pass `mapping` to override the token map.
    """
    lo, hi = len_range
    if lo < 1 or hi > max_len or lo > hi:
        raise DataError(f"len_range {len_range} outside [1, {max_len}]")
    vocab = Vocabulary.synthetic(vocab_size)
    rng = np.random.default_rng(seed)
    regular = np.array(vocab.regular_ids)

    if task == "mapped-swap" and mapping is None:
        perm = rng.permutation(regular)
        mapping = dict(zip(regular.tolist(), perm.tolist()))

    pairs = []
    for _ in range(n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = rng.choice(regular, size=n).tolist()
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = src[::-1]
        elif task == "mapped-swap":
            tgt = [mapping[t] for t in src]
            i = 0
            while i + 1 < len(tgt):
                if _swap_fires(tgt[i], tgt[i + 1], swap_prob):
                    tgt[i], tgt[i + 1] = tgt[i + 1], tgt[i]
                    i += 2
                else:
                    i += 1
        else:
            raise DataError(f"unknown task {task!r}")
        pairs.append(SentencePair(src, tgt))
    return Corpus(pairs, vocab)


# -----------------------------------------------------------------------------
# file I/O
# -----------------------------------------------------------------------------


def save_vocab(vocab, path):
    with open(path, "w", encoding="utf-8") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path):
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.strip()]
    return Vocabulary(tokens)


def save_corpus(corpus, path, vocab_path=None):
    with open(path, "w", encoding="utf-8") as f:
        for p in corpus.pairs:
            f.write(corpus.vocab.decode(p.source) + "\t" + corpus.vocab.decode(p.target) + "\n")
    if vocab_path is not None:
        save_vocab(corpus.vocab, vocab_path)


def load_corpus(path, vocab):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected one tab separator")
            pairs.append(SentencePair(vocab.encode(parts[0]), vocab.encode(parts[1])))
    return Corpus(pairs, vocab)
