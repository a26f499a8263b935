"""Sample builders, curriculum schedule, batching, and the train loop."""

import csv

import numpy as np
import pytest

import hrt.training as tr
from hrt.data import BOS, BOS_K, EOS, MASK, PAD, Corpus, SentencePair, Vocabulary
from hrt.model import ModelConfig, TransformerModel
from hrt.training import (
    CurriculumSchedule, TrainingError, assemble_batch, build_at_sample,
    build_cmlm_sample, build_skip_at_sample, build_skip_cmlm_sample,
    schedule_pk, skip_anchor_positions, skip_anchor_tokens,
)

# the worked four-task example: target y1..y4, k=2
Y = [10, 11, 12, 13]  # y1..y4 as concrete ids
PAIR = SentencePair([20, 21, 22], Y)


class TestWorkedExample:
    def test_at(self):
        s = build_at_sample(PAIR)
        assert s.decoder_input.ids == [BOS] + Y
        assert s.decoder_input.positions == [0, 1, 2, 3, 4]
        assert s.target_ids == Y + [EOS]
        assert s.loss_mask == [True] * 5
        assert s.mode == "causal"

    def test_cmlm_masks_two_and_three(self):
        # drive the rng until positions {1, 2} (y2, y3) are the masked set
        for seed in range(500):
            rng = np.random.default_rng(seed)
            s = build_cmlm_sample(PAIR, rng)
            if s.decoder_input.ids == [Y[0], MASK, MASK, Y[3], EOS]:
                assert s.decoder_input.positions == [1, 2, 3, 4, 5]
                assert s.target_ids == [PAD, Y[1], Y[2], PAD, PAD]
                assert s.loss_mask == [False, True, True, False, False]
                assert s.mode == "full"
                return
        pytest.fail("mask pattern {2,3} never drawn")

    def test_skip_at(self):
        s = build_skip_at_sample(PAIR, 2)
        assert s.decoder_input.ids == [BOS_K[2], Y[1], Y[3]]
        assert s.decoder_input.positions == [0, 2, 4]
        assert s.target_ids == [Y[1], Y[3], EOS]
        assert s.loss_mask == [True] * 3

    def test_skip_cmlm(self):
        s = build_skip_cmlm_sample(PAIR, 2)
        assert s.decoder_input.ids == [MASK, Y[1], MASK, Y[3], EOS]
        assert s.decoder_input.positions == [1, 2, 3, 4, 5]
        assert s.target_ids == [Y[0], PAD, Y[2], PAD, PAD]
        assert s.loss_mask == [True, False, True, False, False]


class TestAnchors:
    def test_n4_k2(self):
        assert skip_anchor_positions(4, 2) == [2, 4, 6]
        assert skip_anchor_tokens(Y, 2) == [Y[1], Y[3], EOS]

    def test_n5_k3(self):
        t = [10, 11, 12, 13, 14]
        assert skip_anchor_positions(5, 3) == [3, 6]
        assert skip_anchor_tokens(t, 3) == [t[2], EOS]

    def test_n1_k2(self):
        assert skip_anchor_positions(1, 2) == [2]
        assert skip_anchor_tokens([10], 2) == [EOS]

    def test_exactly_one_eos(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 30))
            k = int(rng.choice([2, 3, 4]))
            toks = skip_anchor_tokens(list(range(10, 10 + n)), k)
            assert toks.count(EOS) == 1 and toks[-1] == EOS
            assert len(toks) == -(-(n + 1) // k)

    def test_skip_at_k4(self):
        s = build_skip_at_sample(PAIR, 4)
        assert s.decoder_input.ids == [BOS_K[4], Y[3]]
        assert s.decoder_input.positions == [0, 4]
        assert s.target_ids == [Y[3], EOS]

    def test_skip_cmlm_n3_k2(self):
        p = SentencePair([20], [10, 11, 12])
        s = build_skip_cmlm_sample(p, 2)
        assert s.decoder_input.ids == [MASK, 11, MASK, EOS]
        assert s.target_ids == [10, PAD, 12, PAD]

    def test_anchor_consistency_between_tasks(self):
        """SKIP-AT targets equal the unmasked SKIP-CMLM tokens at p <= N."""
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 20))
            pair = SentencePair([20], list(rng.integers(10, 60, size=n)))
            for k in (2, 3, 4):
                at = build_skip_at_sample(pair, k)
                cm = build_skip_cmlm_sample(pair, k)
                observed = [t for t, p in zip(cm.decoder_input.ids,
                                              cm.decoder_input.positions)
                            if t != MASK and p <= n]
                assert at.target_ids[: len(observed)] == observed


class TestSchedule:
    def test_endpoints_exact(self):
        assert schedule_pk(0, 100) == 0.0
        assert schedule_pk(100, 100) == 1.0

    def test_midpoint_linear(self):
        assert schedule_pk(50, 100, 1.0) == 0.5

    def test_monotone(self):
        vals = [schedule_pk(t, 1000, 1.0) for t in range(0, 1001, 10)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_errors(self):
        with pytest.raises(TrainingError):
            schedule_pk(1, 0)
        with pytest.raises(TrainingError):
            schedule_pk(5, 4)
        with pytest.raises(TrainingError):
            schedule_pk(1, 10, 0.0)

    def test_schedule_object(self):
        s = CurriculumSchedule(200, exponent=2.0)
        assert s.pk(100) == 0.25


class TestAssembleBatch:
    def _pairs(self, n, rng):
        return [SentencePair([20, 21], list(rng.integers(10, 60, size=4)))
                for _ in range(n)]

    def test_pk_zero_only_auxiliary(self):
        rng = np.random.default_rng(0)
        samples = assemble_batch(self._pairs(20, rng), 0.0, 2, rng)
        assert {s.task for s in samples} == {"AT", "CMLM"}

    def test_pk_one_only_primary(self):
        rng = np.random.default_rng(0)
        samples = assemble_batch(self._pairs(20, rng), 1.0, 2, rng)
        assert {s.task for s in samples} == {"SKIP-AT", "SKIP-CMLM"}

    def test_binomial_fraction(self):
        rng = np.random.default_rng(42)
        samples = assemble_batch(self._pairs(10000, rng), 0.5, 2, rng)
        primary = sum(1 for s in samples if s.task == "SKIP-AT")
        assert 0.47 <= primary / 10000 <= 0.53

    def test_pairs_yield_both_branch_samples(self):
        rng = np.random.default_rng(0)
        samples = assemble_batch(self._pairs(10, rng), 0.5, 2, rng)
        assert len(samples) == 20

    def test_invalid_pk(self):
        rng = np.random.default_rng(0)
        with pytest.raises(TrainingError):
            assemble_batch(self._pairs(2, rng), 1.5, 2, rng)


def tiny_setup(vocab_size=15, n_pairs=40, seed=0):
    vocab = Vocabulary.synthetic(vocab_size)
    rng = np.random.default_rng(seed)
    pairs = [
        SentencePair(src := list(rng.integers(7, vocab_size, size=int(rng.integers(2, 6)))), src)
        for _ in range(n_pairs)
    ]
    corpus = Corpus(pairs, vocab)
    cfg = ModelConfig(d_model=16, d_ff=32, n_heads=2, enc_layers=1,
                      vocab_size=vocab_size, max_len=16)
    return corpus, TransformerModel(cfg, seed=seed)


class TestTrainLoop:
    def test_loss_mask_zero_gradient(self):
        """Non-masked positions contribute exactly zero logit gradient."""
        corpus, model = tiny_setup()
        sample = build_skip_cmlm_sample(corpus.pairs[0], 2)
        import hrt.numerics as nm

        mem = model.encode(np.array([sample.source]))
        ids = np.array([sample.decoder_input.ids])
        pos = np.array([sample.decoder_input.positions])
        logits = model.decode_parallel(ids, pos, mem, "full")
        mask = np.array([sample.loss_mask])
        loss = nm.cross_entropy_masked(logits, np.array([sample.target_ids]), mask)
        # grab the gradient arriving at the logits node
        grads = {}
        orig = logits._backward
        logits._backward = lambda g: (grads.__setitem__("g", g.copy()), orig(g))
        loss.backward()
        g = grads["g"]
        assert np.abs(g[0][~mask[0]]).max() == 0.0
        assert np.abs(g[0][mask[0]]).max() > 0.0

    def test_loss_decreases(self):
        corpus, model = tiny_setup()
        sched = CurriculumSchedule(60)
        trace = tr.train(model, corpus, sched, steps=60, k=2, batch_size=8, seed=0)
        first = np.mean([r["loss"] for r in trace[:6]])
        last = np.mean([r["loss"] for r in trace[-6:]])
        assert last < first

    def test_at_only_has_no_mask_tasks(self):
        corpus, model = tiny_setup()
        sched = CurriculumSchedule(5)
        trace = tr.train(model, corpus, sched, steps=5, k=2, batch_size=4,
                         seed=0, at_only=True)
        assert all(r["p_k"] == 0.0 for r in trace)
        assert all("loss_AT" in r and "loss_CMLM" not in r for r in trace)

    def test_vocab_mismatch(self):
        corpus, _ = tiny_setup(vocab_size=15)
        model = TransformerModel(ModelConfig(
            d_model=16, d_ff=32, n_heads=2, enc_layers=1, vocab_size=20,
            max_len=16))
        with pytest.raises(TrainingError):
            tr.train(model, corpus, CurriculumSchedule(5), 5, 2)

    def test_trace_csv(self, tmp_path):
        corpus, model = tiny_setup()
        trace = tr.train(model, corpus, CurriculumSchedule(4), 4, 2,
                         batch_size=4, seed=0)
        path = tmp_path / "trace.csv"
        tr.write_trace(trace, path)
        with open(path) as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["step", "p_k", "loss", "loss_AT", "loss_CMLM",
                           "loss_SKIP-AT", "loss_SKIP-CMLM"]
        assert len(rows) == 5
        assert rows[1][0] == "1"


class TestFinetuneAndDistill:
    def test_finetune_rejects_vocab_mismatch(self, tmp_path):
        from hrt.checkpoint import save_checkpoint

        corpus, model = tiny_setup(vocab_size=15)
        ck = tmp_path / "at.ckpt"
        save_checkpoint(model, ck)
        bigger, _ = tiny_setup(vocab_size=16)[0], None
        with pytest.raises(TrainingError):
            tr.finetune_from_at(ck, bigger, CurriculumSchedule(2), 2, 2)

    def test_distill_identity_teacher(self):
        corpus, _ = tiny_setup()
        distilled, fallbacks = tr.distill_corpus(
            lambda src, beam, lp: list(src), corpus)
        assert fallbacks == 0
        assert distilled == Corpus(
            [SentencePair(p.source, p.source) for p in corpus.pairs], corpus.vocab)

    def test_distill_empty_output_falls_back(self):
        corpus, _ = tiny_setup()
        distilled, fallbacks = tr.distill_corpus(lambda src, beam, lp: [], corpus)
        assert fallbacks == len(corpus.pairs)
        assert all(p.source == p.target for p in distilled.pairs)

    def test_distill_strips_specials(self):
        corpus, _ = tiny_setup()
        distilled, _ = tr.distill_corpus(
            lambda src, beam, lp: [MASK] + list(src) + [EOS], corpus)
        assert all(
            all(t >= 7 for t in p.target) for p in distilled.pairs)
