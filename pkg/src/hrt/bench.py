"""Throughput, quality, and memory measurement for the two decode modes.

Re-exports the arena primitives and the closed-form activation estimator so
benchmark callers have a single import surface.
"""

from __future__ import annotations

import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field

import math

import numpy as np

from .arena import Arena, ArenaOverflowError, Workspace, arena_alloc, arena_reset
from .decoding import at_translate, hrt_translate
from .infer import InferenceSession, estimate_max_bytes, make_arena

__all__ = [
    "Arena", "ArenaOverflowError", "Workspace", "arena_alloc", "arena_reset",
    "estimate_max_bytes", "make_arena", "BenchReport", "measure_wps",
    "evaluate", "bleu", "sequence_accuracy",
]


class BenchError(RuntimeError):
    pass


@dataclass
class BenchReport:
    mode: str
    k: int
    b_at: int
    b_nat: int
    runs: int
    sentences: int
    source_tokens: int
    seconds_mean: float
    seconds_std: float
    wps_mean: float
    wps_std: float
    decoder_calls: int  # per full pass over the corpus
    arena_capacity: int = 0
    arena_high_water: int = 0
    run_seconds: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _make_translate(session, ws, mode, k, b_at, b_nat):
    if mode == "at":
        return lambda src: at_translate(session, src, beam=b_at, ws=ws)
    if mode == "hrt":
        return lambda src: hrt_translate(session, src, k, b_at, b_nat, ws=ws)
    raise BenchError(f"unknown mode {mode!r}")


def measure_wps(model, corpus, mode="hrt", k=2, b_at=1, b_nat=1, runs=5,
                warmup=10, dtype=np.float32, use_arena=True):
    """Decode the corpus `runs` times and report source words per second.

    A short warmup pass absorbs one-time numpy dispatch costs before timing
    starts; each timed run uses the monotonic clock around the whole corpus.
    """
    if runs < 1:
        raise BenchError("runs must be >= 1")
    if mode not in ("at", "hrt"):
        raise BenchError(f"unknown mode {mode!r}")
    session = InferenceSession(model, dtype=dtype)
    arena = None
    if use_arena:
        arena = make_arena(session.config, k=k, b_at=b_at, b_nat=b_nat,
                           dtype=dtype, mode=mode)
    ws = Workspace(arena)
    translate = _make_translate(session, ws, mode, k, b_at, b_nat)
    for pair in corpus.pairs[:warmup]:
        translate(pair.source)
    tokens = sum(len(p.source) for p in corpus.pairs)
    seconds, calls = [], 0
    for r in range(runs):
        session.decoder_calls = 0
        t0 = time.monotonic()
        for pair in corpus.pairs:
            translate(pair.source)
        seconds.append(time.monotonic() - t0)
        calls = session.decoder_calls
    mean = statistics.fmean(seconds)
    std = statistics.stdev(seconds) if runs > 1 else 0.0
    wps = [tokens / s for s in seconds]
    return BenchReport(
        mode=mode, k=k, b_at=b_at, b_nat=b_nat, runs=runs,
        sentences=len(corpus.pairs), source_tokens=tokens,
        seconds_mean=mean, seconds_std=std,
        wps_mean=statistics.fmean(wps),
        wps_std=statistics.stdev(wps) if runs > 1 else 0.0,
        decoder_calls=calls,
        arena_capacity=arena.capacity if arena else 0,
        arena_high_water=arena.high_water if arena else 0,
        run_seconds=seconds,
    )


def evaluate(model, corpus, mode="at", k=2, b_at=1, b_nat=1, dtype=np.float32):
    """Decode the corpus once; returns accuracy, BLEU, and call statistics."""
    session = InferenceSession(model, dtype=dtype)
    ws = Workspace(make_arena(session.config, k=k, b_at=b_at, b_nat=b_nat,
                              dtype=dtype, mode=mode))
    translate = _make_translate(session, ws, mode, k, b_at, b_nat)
    outputs = [translate(p.source).tokens for p in corpus.pairs]
    references = [p.target for p in corpus.pairs]
    return {
        "mode": mode,
        "k": k,
        "sentences": len(outputs),
        "sequence_accuracy": sequence_accuracy(outputs, references),
        "bleu": bleu(outputs, references),
        "decoder_calls": session.decoder_calls,
        "outputs": outputs,
    }


# -----------------------------------------------------------------------------
# metrics
# -----------------------------------------------------------------------------


def _ngrams(seq, n):
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus-level BLEU with brevity penalty, scaled to [0, 100].

    Unigram precision is unsmoothed; higher orders use add-one smoothing so
    short references do not zero out the score.
    """
    if len(candidates) != len(references):
        raise BenchError("candidate/reference count mismatch")
    if not candidates:
        raise BenchError("empty corpus")
    matched = [0] * max_n
    total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, max_n + 1):
            cc = _ngrams(cand, n)
            rc = _ngrams(ref, n)
            matched[n - 1] += sum(min(v, rc[g]) for g, v in cc.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    if total[0] == 0 or matched[0] == 0:
        return 0.0
    log_p = [math.log(matched[0] / total[0])]
    for n in range(2, max_n + 1):
        log_p.append(math.log((matched[n - 1] + 1) / (total[n - 1] + 1)))
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return 100.0 * bp * math.exp(sum(log_p) / max_n)


def sequence_accuracy(candidates, references):
    if len(candidates) != len(references):
        raise BenchError("candidate/reference count mismatch")
    if not candidates:
        raise BenchError("empty corpus")
    hits = sum(list(c) == list(r) for c, r in zip(candidates, references))
    return hits / len(candidates)
