"""Four-task sample construction, curriculum scheduling, and the train loop.

Tasks: AT and CMLM (auxiliary), SKIP-AT and SKIP-CMLM (primary). Every pair in
a batch yields both samples of its branch; the primary/auxiliary split is a
per-pair Bernoulli draw with probability p_k scheduled as (t/T)^lambda.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .checkpoint import load_model
from .data import BOS, EOS, MASK, PAD, Corpus
from .model import ModelConfig, PositionedSequence, TransformerModel


class TrainingError(RuntimeError):
    pass


CAUSAL_TASKS = ("AT", "SKIP-AT")
FULL_TASKS = ("CMLM", "SKIP-CMLM")


@dataclass
class TrainingSample:
    task: str  # AT | CMLM | SKIP-AT | SKIP-CMLM
    source: list
    decoder_input: PositionedSequence
    target_ids: list
    loss_mask: list

    def __post_init__(self):
        n = len(self.decoder_input)
        if len(self.target_ids) != n or len(self.loss_mask) != n:
            raise TrainingError("decoder input, targets and loss mask must align")

    @property
    def mode(self):
        return "causal" if self.task in CAUSAL_TASKS else "full"


@dataclass
class CurriculumSchedule:
    total_steps: int
    exponent: float = 1.0

    def pk(self, t):
        return schedule_pk(t, self.total_steps, self.exponent)


def schedule_pk(t, total_steps, exponent=1.0):
    """Primary-task proportion at step t: (t/T)^lambda, linear for lambda=1."""
    if total_steps == 0:
        raise TrainingError("schedule requires total_steps > 0")
    if not 0 <= t <= total_steps:
        raise TrainingError(f"step {t} outside [0, {total_steps}]")
    if exponent <= 0:
        raise TrainingError("exponent must be positive")
    return (t / total_steps) ** exponent


# -----------------------------------------------------------------------------
# sample builders
# -----------------------------------------------------------------------------


def build_at_sample(pair):
    """[BOS] y1..yN at 0..N -> y1..yN [EOS], loss everywhere."""
    tgt = pair.target
    if not tgt:
        raise TrainingError("empty target")
    n = len(tgt)
    return TrainingSample(
        task="AT",
        source=list(pair.source),
        decoder_input=PositionedSequence([BOS] + list(tgt), list(range(n + 1))),
        target_ids=list(tgt) + [EOS],
        loss_mask=[True] * (n + 1),
    )


def build_cmlm_sample(pair, rng):
    """y1..yN [EOS] with a random subset of y-positions masked; loss at masks.

    Mask count is ceil-free: ratio ~ Uniform(0,1], at least one mask, EOS never
    masked. Positions are 1..N+1.
    """
    tgt = list(pair.target)
    n = len(tgt)
    ratio = 1.0 - rng.random()  # (0, 1]
    n_mask = max(1, int(round(ratio * n)))
    masked = set(rng.choice(n, size=n_mask, replace=False).tolist())
    ids = [MASK if i in masked else tgt[i] for i in range(n)] + [EOS]
    targets = [tgt[i] if i in masked else PAD for i in range(n)] + [PAD]
    loss = [i in masked for i in range(n)] + [False]
    return TrainingSample(
        task="CMLM",
        source=list(pair.source),
        decoder_input=PositionedSequence(ids, list(range(1, n + 2))),
        target_ids=targets,
        loss_mask=loss,
    )


def skip_anchor_positions(n, k):
    """Anchor grid positions for a length-n target: m = ceil((n+1)/k) anchors
    at (k, 2k, ..., mk). Anchor tokens come from skip_anchor_tokens: y_p for
    p <= n, [EOS] otherwise (exactly the last anchor)."""
    if n < 1 or k < 2:
        raise TrainingError("need n >= 1 and k >= 2")
    m = math.ceil((n + 1) / k)
    positions = [k * (i + 1) for i in range(m)]
    return positions


def skip_anchor_tokens(target, k):
    """Anchor tokens for the grid of skip_anchor_positions."""
    n = len(target)
    return [target[p - 1] if p <= n else EOS for p in skip_anchor_positions(n, k)]


def build_skip_at_sample(pair, k):
    """[BOS_k] a1..a_{m-1} at (0, k, ..., (m-1)k) -> a1..am, loss everywhere."""
    from .data import BOS_K

    tgt = list(pair.target)
    positions = skip_anchor_positions(len(tgt), k)
    anchors = skip_anchor_tokens(tgt, k)
    return TrainingSample(
        task="SKIP-AT",
        source=list(pair.source),
        decoder_input=PositionedSequence([BOS_K[k]] + anchors[:-1], [0] + positions[:-1]),
        target_ids=anchors,
        loss_mask=[True] * len(anchors),
    )


def build_skip_cmlm_sample(pair, k):
    """Positions 1..N+1: y_p where k | p and p <= N, [EOS] at N+1, [MASK]
    elsewhere; loss exactly at the masked positions."""
    tgt = list(pair.target)
    n = len(tgt)
    ids, targets, loss = [], [], []
    for p in range(1, n + 2):
        if p == n + 1:
            ids.append(EOS)
            targets.append(PAD)
            loss.append(False)
        elif p % k == 0:
            ids.append(tgt[p - 1])
            targets.append(PAD)
            loss.append(False)
        else:
            ids.append(MASK)
            targets.append(tgt[p - 1])
            loss.append(True)
    return TrainingSample(
        task="SKIP-CMLM",
        source=list(pair.source),
        decoder_input=PositionedSequence(ids, list(range(1, n + 2))),
        target_ids=targets,
        loss_mask=loss,
    )


def assemble_batch(pairs, p_k, k, rng, at_only=False):
    """Per pair: primary branch (SKIP-AT + SKIP-CMLM) with probability p_k,
    else auxiliary branch (AT + CMLM). Returns a flat sample list."""
    if not 0 <= p_k <= 1:
        raise TrainingError("p_k must be in [0, 1]")
    samples = []
    for pair in pairs:
        if at_only:
            samples.append(build_at_sample(pair))
        elif rng.random() < p_k:
            samples.append(build_skip_at_sample(pair, k))
            samples.append(build_skip_cmlm_sample(pair, k))
        else:
            samples.append(build_at_sample(pair))
            samples.append(build_cmlm_sample(pair, rng))
    return samples


# -----------------------------------------------------------------------------
# batching helpers
# -----------------------------------------------------------------------------


def _pad_sources(samples_or_pairs, get_source):
    srcs = [get_source(s) for s in samples_or_pairs]
    smax = max(len(s) for s in srcs)
    ids = np.full((len(srcs), smax), PAD, dtype=np.int64)
    mask = np.zeros((len(srcs), smax), dtype=bool)
    for i, s in enumerate(srcs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = True
    return ids, mask


def _pad_group(samples):
    """Pad a same-mode sample group to rectangular id/position/target arrays."""
    tmax = max(len(s.decoder_input) for s in samples)
    b = len(samples)
    ids = np.full((b, tmax), PAD, dtype=np.int64)
    positions = np.zeros((b, tmax), dtype=np.int64)
    targets = np.full((b, tmax), PAD, dtype=np.int64)
    loss = np.zeros((b, tmax), dtype=bool)
    keymask = np.zeros((b, tmax), dtype=bool)
    for i, s in enumerate(samples):
        n = len(s.decoder_input)
        ids[i, :n] = s.decoder_input.ids
        positions[i, :n] = s.decoder_input.positions
        # pad slots are masked out of attention and loss, so they share one
        # filler position; incrementing instead could run off the PE table
        positions[i, n:] = s.decoder_input.positions[-1] + 1
        targets[i, :n] = s.target_ids
        loss[i, :n] = s.loss_mask
        keymask[i, :n] = True
    return ids, positions, targets, loss, keymask


def _per_task_losses(logits_data, targets, loss, tasks):
    """Mean NLL per task name, computed outside the graph (for the trace)."""
    flat = logits_data.reshape(-1, logits_data.shape[-1])
    mx = flat.max(axis=-1)
    lse = mx + np.log(np.exp(flat - mx[:, None]).sum(axis=-1))
    nll = (lse - flat[np.arange(flat.shape[0]), targets.reshape(-1)]).reshape(targets.shape)
    out = {}
    for task in sorted(set(tasks)):
        rows = np.array([t == task for t in tasks])
        m = loss[rows]
        out[task] = float(nll[rows][m].mean()) if m.any() else float("nan")
    return out


# -----------------------------------------------------------------------------
# train loop
# -----------------------------------------------------------------------------


def train_step(model, samples, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """One forward/backward/Adam update over an assembled sample list.

    Returns (total_loss, per-task mean losses). The causal and full groups are
    weighted equally when both are present.
    """
    causal = [s for s in samples if s.mode == "causal"]
    full = [s for s in samples if s.mode == "full"]
    if full and len(full) != len(causal):
        raise TrainingError("causal/full sample groups must align pairwise")
    # encoder runs once per pair; both groups follow the pair order
    src_ids, src_mask = _pad_sources(causal if causal else full, lambda s: s.source)
    memory = model.encode(src_ids, src_mask)
    losses = []
    task_losses = {}
    for group in (causal, full):
        if not group:
            continue
        ids, positions, targets, loss_mask, keymask = _pad_group(group)
        logits = model.decode_parallel(
            ids, positions, memory, group[0].mode,
            dec_key_mask=keymask, src_key_mask=src_mask,
        )
        losses.append(nm.cross_entropy_masked(logits, targets, loss_mask))
        task_losses.update(
            _per_task_losses(logits.data, targets, loss_mask, [s.task for s in group])
        )
    loss = losses[0] if len(losses) == 1 else nm.mul(nm.add(losses[0], losses[1]), 0.5)
    if not np.isfinite(loss.data):
        raise TrainingError("training diverged: non-finite loss")
    loss.backward()
    nm.adam_step(model.parameters(), lr, beta1, beta2, eps)
    return float(loss.data), task_losses


def train(model, corpus, schedule, steps, k, batch_size=32, seed=0,
          warmup=400, lr_factor=2.0, at_only=False, log_every=0):
    """Joint four-task training with the p_k curriculum.

    Returns a loss trace: list of dicts with step, p_k and per-task mean loss.
    Raises TrainingError on divergence. `at_only` drops CMLM and forces
    p_k = 0, reproducing a plain autoregressive baseline.
    """
    if corpus.vocab is not None and len(corpus.vocab) != model.config.vocab_size:
        raise TrainingError("model and corpus vocabulary sizes disagree")
    rng = np.random.default_rng(seed)
    trace = []
    for t in range(1, steps + 1):
        p_k = 0.0 if at_only else schedule.pk(min(t, schedule.total_steps))
        idx = rng.integers(0, len(corpus.pairs), size=batch_size)
        pairs = [corpus.pairs[i] for i in idx]
        samples = assemble_batch(pairs, p_k, k, rng, at_only=at_only)
        lr = nm.noam_lr(t, model.config.d_model, warmup=warmup, factor=lr_factor)
        total, per_task = train_step(model, samples, lr)
        row = {"step": t, "p_k": p_k, "loss": total}
        row.update({f"loss_{task}": v for task, v in per_task.items()})
        trace.append(row)
        if log_every and t % log_every == 0:
            print(f"step {t}/{steps} p_k={p_k:.3f} loss={total:.4f}")
    return trace


def finetune_from_at(at_checkpoint, corpus, schedule, steps, k, **train_kwargs):
    """Initialize from a pretrained AT checkpoint and run the HRT curriculum."""
    model = load_model(at_checkpoint)
    if len(corpus.vocab) != model.config.vocab_size:
        raise TrainingError("checkpoint vocabulary size does not match corpus")
    trace = train(model, corpus, schedule, steps, k, **train_kwargs)
    return model, trace


def write_trace(trace, path):
    """Loss trace as CSV: step, p_k, then per-task mean loss columns."""
    tasks = ["AT", "CMLM", "SKIP-AT", "SKIP-CMLM"]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "p_k", "loss"] + [f"loss_{t}" for t in tasks])
        for row in trace:
            w.writerow(
                [row["step"], f"{row['p_k']:.6f}", f"{row['loss']:.6f}"]
                + [
                    f"{row[f'loss_{t}']:.6f}" if f"loss_{t}" in row else ""
                    for t in tasks
                ]
            )


def distill_corpus(teacher_translate, corpus, beam=5, length_penalty=0.6):
    """Replace every target with the teacher's beam-search output.

    `teacher_translate(source_ids, beam, length_penalty)` must return a token
    list. Empty (or all-special) outputs fall back to a source copy and are
    counted. Returns (Corpus, fallback_count).
    """
    from .data import N_SPECIALS, SentencePair

    pairs = []
    fallbacks = 0
    for pair in corpus.pairs:
        out = [t for t in teacher_translate(pair.source, beam, length_penalty)
               if t >= N_SPECIALS]
        if not out:
            out = list(pair.source)
            fallbacks += 1
        pairs.append(SentencePair(list(pair.source), out))
    return Corpus(pairs, corpus.vocab), fallbacks
