"""Autoregressive baseline search and the two-stage hybrid decode.

Stage I generates every k-th token (anchors) causally from [BOS_k] at grid
positions (k, 2k, ...); stage II inserts k-1 [MASK]s before each anchor and
fills them all with ONE bidirectional decoder call. Candidates are ranked by
the summed anchor and fill log-probabilities under a length penalty.

Generation is restricted to regular tokens plus [EOS]; other specials are
never proposed. Stage-I scores are the model's full-vocabulary log-probs of
the chosen tokens; fill probabilities are renormalized over the generable set
(the excluded columns are driven to -1e9 before the softmax).

The stage-I beam always retains the running greedy chain, so the beam-1
candidate is available to every larger beam and the best combined score is
monotone in the beam size.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .arena import Workspace
from .data import BOS, BOS_K, EOS, MASK, PAD, truncate
from .model import PositionedSequence


class DecodingError(ValueError):
    pass


# ids a decoder may emit: everything except these
EXCLUDED_OUTPUT_IDS = (PAD, BOS, MASK) + tuple(BOS_K.values())


@dataclass
class Hypothesis:
    """Partial skip-sequence: anchor tokens at (k, 2k, ...) plus score."""

    tokens: list = field(default_factory=list)
    positions: list = field(default_factory=list)
    score: float = 0.0  # sum of chosen-token log-softmax values
    finished: bool = False
    forced: bool = False  # finished by the step cap rather than naturally
    is_greedy: bool = False
    row: int = 0  # DecoderCache beam row while live

    def __post_init__(self):
        if self.finished and (not self.tokens or self.tokens[-1] != EOS):
            raise DecodingError("finished hypothesis must end with [EOS]")


@dataclass
class Translation:
    tokens: list
    skip_at_score: float
    skip_cmlm_score: float
    score: float
    decoder_calls: int
    wall_time: float = 0.0
    forced: bool = False

    def __post_init__(self):
        if any(t in (MASK, PAD, EOS) for t in self.tokens):
            raise DecodingError("translation must not contain special markers")


def truncate_at_eos(tokens):
    """Prefix strictly before the first [EOS]; unchanged if there is none."""
    tokens = list(tokens)
    if EOS in tokens:
        return tokens[: tokens.index(EOS)]
    return tokens


# -----------------------------------------------------------------------------
# shared incremental beam search
# -----------------------------------------------------------------------------


def _allowed_row(logp_row):
    row = np.array(logp_row, dtype=np.float64)
    row[list(EXCLUDED_OUTPUT_IDS)] = -np.inf
    return row


def _beam_search(session, ws, bos, interval, beam, max_steps, phase="skip-at"):
    """Causal beam search over grid positions (interval, 2*interval, ...).

    Returns (finished hypotheses, steps). One decoder call per step on <= beam
    live rows. At the step cap every live hypothesis takes its [EOS]
    continuation (force-finish). Ties break toward the lowest token id.
    """
    cache = session.start_cache(beam, max_steps + 1, ws, phase=phase)
    live = [Hypothesis(is_greedy=True, row=0)]
    finished = []
    steps = 0
    feed = np.full(beam, bos, dtype=np.int64)
    for t in range(max_steps):
        for h in live:
            feed[h.row] = bos if t == 0 else h.tokens[-1]
        logp = session.step(cache, feed, t * interval)
        steps += 1
        pos = (t + 1) * interval
        last = t == max_steps - 1
        candidates = []  # (score, token, parent, is_greedy)
        for h in live:
            row = _allowed_row(logp[h.row])
            greedy_tok = int(np.argmax(row))
            toks = [EOS] if last else np.argsort(-row, kind="stable")[: beam + 1]
            for tok in toks:
                tok = int(tok)
                candidates.append((
                    h.score + float(row[tok]), tok, h,
                    h.is_greedy and (last or tok == greedy_tok),
                ))
        candidates.sort(key=lambda c: (-c[0], c[1]))

        def _child(score, tok, parent, greedy):
            return Hypothesis(
                tokens=parent.tokens + [tok],
                positions=parent.positions + [pos],
                score=score,
                finished=tok == EOS,
                forced=last and tok == EOS,
                is_greedy=greedy,
            )

        # only the step's top `beam` candidates act (an EOS outside them would
        # break the beam=1 greedy degeneracy); the greedy chain always may
        new_live, new_parents = [], []
        for rank, (score, tok, parent, greedy) in enumerate(candidates):
            if tok == EOS:
                if rank < beam or greedy:
                    finished.append(_child(score, tok, parent, greedy))
            elif len(new_live) < beam:
                new_live.append(_child(score, tok, parent, greedy))
                new_parents.append(parent.row)
        greedy_done = any(h.is_greedy for h in finished)
        if not greedy_done and not any(h.is_greedy for h in new_live):
            # greedy chain was pruned: reserve the last beam slot for it
            gc = next((c for c in candidates if c[3] and c[1] != EOS), None)
            if gc is not None and new_live:
                new_live[-1] = _child(gc[0], gc[1], gc[2], True)
                new_parents[-1] = gc[2].row
        if not new_live or (len(finished) >= beam and greedy_done):
            break
        session.reorder(cache, new_parents + [0] * (beam - len(new_parents)))
        for j, h in enumerate(new_live):
            h.row = j
        live = new_live
    return finished, steps


# -----------------------------------------------------------------------------
# autoregressive baseline
# -----------------------------------------------------------------------------


def at_translate(session, source, beam=1, length_penalty=0.6, max_len=None, ws=None):
    """Standard beam search from [BOS]; beam=1 degenerates to greedy argmax.

    Ranking is log-prob / len^alpha with len counting the generated tokens
    including [EOS]. decoder_calls equals the number of incremental steps.
    """
    if beam < 1:
        raise DecodingError("beam must be >= 1")
    ws = ws or Workspace()
    max_len = max_len or session.config.max_len
    t0 = time.perf_counter()
    session.encode(truncate(list(source), session.config.max_len), ws)
    finished, steps = _beam_search(session, ws, BOS, 1, beam, max_len)
    best = max(finished, key=lambda h: h.score / len(h.tokens) ** length_penalty)
    return Translation(
        tokens=truncate_at_eos(best.tokens),
        skip_at_score=best.score,
        skip_cmlm_score=0.0,
        score=best.score / len(best.tokens) ** length_penalty,
        decoder_calls=steps,
        wall_time=time.perf_counter() - t0,
        forced=best.forced,
    )


# -----------------------------------------------------------------------------
# two-stage hybrid decode
# -----------------------------------------------------------------------------


def skip_at_stage(session, k, b_at, max_steps=None, ws=None):
    """Stage I: beam search over anchors at grid positions from [BOS_k].

    Every returned hypothesis ends with [EOS]; each step costs one decoder
    call and the step count never exceeds ceil(L / k).
    """
    if k not in session.config.chunk_sizes:
        raise DecodingError(f"chunk size k={k} not supported by the model")
    ws = ws or Workspace()
    if max_steps is None:
        max_steps = math.ceil(session.config.max_len / k)
    finished, steps = _beam_search(session, ws, BOS_K[k], k, b_at, max_steps)
    return finished, steps


def build_stage2_input(anchors, k):
    """Insert k-1 [MASK]s before every anchor: length k*m, positions 1..km."""
    anchors = list(anchors)
    if not anchors or anchors[-1] != EOS:
        raise DecodingError("stage-II input requires anchors ending with [EOS]")
    ids = []
    for z in anchors:
        ids.extend([MASK] * (k - 1))
        ids.append(z)
    return PositionedSequence(ids, list(range(1, len(ids) + 1)))


def skip_cmlm_fill(session, stage2_input, ws=None):
    """Stage II: one parallel full-mode call filling every [MASK] by argmax.

    Returns (filled token list, per-mask log-probs in position order). Anchor
    positions pass through unchanged. Exactly one decoder call regardless of
    the mask count.
    """
    ws = ws or Workspace()
    ids = np.asarray(stage2_input.ids, dtype=np.int64)[None, :]
    positions = np.asarray(stage2_input.positions, dtype=np.int64)[None, :]
    logits = session.parallel_logits(ids, positions, "full", ws)
    amax, lp = session.argmax_logprobs(logits, exclude=EXCLUDED_OUTPUT_IDS)
    filled, mask_logprobs = [], []
    for j, tok in enumerate(stage2_input.ids):
        if tok == MASK:
            filled.append(int(amax[0, j]))
            mask_logprobs.append(float(lp[0, j]))
        else:
            filled.append(tok)
    return filled, mask_logprobs


def combined_score(hypothesis, fill_log_probs, k, length_penalty=0.6):
    """Anchor log-probs plus fill log-probs, normalized by (k*m)^alpha."""
    m = len(hypothesis.tokens)
    total = hypothesis.score + float(sum(fill_log_probs))
    return total / (k * m) ** length_penalty


def hrt_translate(session, source, k, b_at=1, b_nat=1, length_penalty=0.6, ws=None):
    """Two-stage decode: skip-AT beam, one batched fill over the top b_nat
    candidates, argmax of the combined score, truncation at the first [EOS].

    decoder_calls = stage-I steps + 1.
    """
    if b_nat < 1 or b_at < b_nat:
        raise DecodingError("need b_at >= b_nat >= 1")
    ws = ws or Workspace()
    c = session.config
    t0 = time.perf_counter()
    session.encode(truncate(list(source), c.max_len), ws)
    finished, steps = skip_at_stage(session, k, b_at, ws=ws)
    finished.sort(key=lambda h: -h.score)
    cands = finished[:b_nat]
    greedy = next((h for h in finished if h.is_greedy), None)
    if greedy is not None and greedy not in cands:
        cands[-1] = greedy  # the beam-1 candidate always reaches stage II

    stage2 = [build_stage2_input(h.tokens, k) for h in cands]
    t_max = max(len(s) for s in stage2)
    b = len(cands)
    ids = np.full((b, t_max), PAD, dtype=np.int64)
    positions = np.tile(np.arange(1, t_max + 1, dtype=np.int64), (b, 1))
    pad_mask = np.zeros((b, t_max), dtype=bool)
    for i, s in enumerate(stage2):
        ids[i, : len(s)] = s.ids
        pad_mask[i, : len(s)] = True
    logits = session.parallel_logits(ids, positions, "full", ws, pad_mask=pad_mask)
    amax, lp = session.argmax_logprobs(logits, exclude=EXCLUDED_OUTPUT_IDS)

    best = None
    for i, (hyp, s2) in enumerate(zip(cands, stage2)):
        filled, cmlm_score = [], 0.0
        for j, tok in enumerate(s2.ids):
            if tok == MASK:
                filled.append(int(amax[i, j]))
                cmlm_score += float(lp[i, j])
            else:
                filled.append(tok)
        score = (hyp.score + cmlm_score) / len(s2) ** length_penalty
        if best is None or score > best[0]:
            best = (score, hyp, filled, cmlm_score)
    score, hyp, filled, cmlm_score = best
    tokens = truncate(truncate_at_eos(filled), c.max_len)
    return Translation(
        tokens=tokens,
        skip_at_score=hyp.score,
        skip_cmlm_score=cmlm_score,
        score=score,
        decoder_calls=steps + 1,
        wall_time=time.perf_counter() - t0,
        forced=hyp.forced,
    )
