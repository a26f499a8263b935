"""Vocabulary, synthetic corpus generation, and file round-trips."""

import numpy as np
import pytest

from hrt import data
from hrt.data import (
    BOS, BOS_K, EOS, MASK, N_SPECIALS, PAD, Corpus, DataError, SentencePair,
    Vocabulary, generate_synthetic,
)


class TestSpecials:
    def test_ids_are_stable(self):
        assert (PAD, BOS, EOS, MASK) == (0, 1, 2, 3)
        assert BOS_K == {2: 4, 3: 5, 4: 6}
        assert N_SPECIALS == 7

    def test_vocab_layout(self):
        v = Vocabulary.synthetic(12)
        assert len(v) == 12
        assert v.tokens[:N_SPECIALS] == data.SPECIAL_TOKENS
        assert v.tokens[N_SPECIALS] == "w0"

    def test_vocab_too_small(self):
        with pytest.raises(DataError):
            Vocabulary.synthetic(N_SPECIALS + 1)

    def test_encode_decode_round_trip(self):
        v = Vocabulary.synthetic(20)
        ids = [7, 12, 9]
        assert v.encode(v.decode(ids)) == ids

    def test_bos_k_lookup(self):
        v = Vocabulary.synthetic(20)
        assert v.bos_k(3) == BOS_K[3]
        with pytest.raises(DataError):
            v.bos_k(5)


class TestPairsAndCorpus:
    def test_pair_rejects_specials(self):
        with pytest.raises(DataError):
            SentencePair([7, EOS], [8])

    def test_pair_rejects_empty(self):
        with pytest.raises(DataError):
            SentencePair([], [8])

    def test_corpus_rejects_out_of_vocab(self):
        v = Vocabulary.synthetic(10)
        with pytest.raises(DataError):
            Corpus([SentencePair([9], [10])], v)


class TestGeneration:
    def test_copy_and_reverse(self):
        c = generate_synthetic("copy", 20, (3, 6), 20, seed=0)
        assert all(p.source == p.target for p in c.pairs)
        r = generate_synthetic("reverse", 20, (3, 6), 20, seed=0)
        assert all(p.source == p.target[::-1] for p in r.pairs)

    def test_deterministic_by_seed(self):
        a = generate_synthetic("mapped-swap", 30, (3, 8), 25, seed=5)
        b = generate_synthetic("mapped-swap", 30, (3, 8), 25, seed=5)
        assert a == b

    def test_mapped_swap_is_function_of_source(self):
        """Equal sources must map to equal targets (learnability)."""
        c = generate_synthetic("mapped-swap", 2000, (3, 3), 12, seed=7)
        seen = {}
        for p in c.pairs:
            key = tuple(p.source)
            if key in seen:
                assert seen[key] == p.target
            seen[key] = p.target

    def test_mapped_swap_identity_mapping_no_swaps(self):
        v = Vocabulary.synthetic(15)
        mapping = {i: i for i in v.regular_ids}
        c = generate_synthetic("mapped-swap", 25, (3, 6), 15, seed=1,
                               swap_prob=0.0, mapping=mapping)
        assert all(p.source == p.target for p in c.pairs)

    def test_mapped_swap_rate_near_swap_prob(self):
        # the hash rule should fire on roughly swap_prob of random token pairs
        rng = np.random.default_rng(0)
        fires = sum(
            data._swap_fires(int(a), int(b), 0.3)
            for a, b in rng.integers(7, 64, size=(20000, 2))
        )
        assert 0.27 < fires / 20000 < 0.33

    def test_len_range_respected(self):
        c = generate_synthetic("copy", 50, (4, 9), 20, seed=2)
        assert all(4 <= len(p.source) <= 9 for p in c.pairs)

    def test_bad_len_range(self):
        with pytest.raises(DataError):
            generate_synthetic("copy", 5, (0, 4), 20, seed=0)

    def test_unknown_task(self):
        with pytest.raises(DataError):
            generate_synthetic("sort", 5, (2, 4), 20, seed=0)

    def test_truncate(self):
        assert data.truncate([1, 2, 3, 4], 2) == [1, 2]
        assert data.truncate([1], 5) == [1]


class TestFileIO:
    def test_corpus_round_trip(self, tmp_path):
        c = generate_synthetic("mapped-swap", 40, (2, 8), 30, seed=9)
        path = tmp_path / "c.tsv"
        vpath = tmp_path / "v.txt"
        data.save_corpus(c, path, vocab_path=vpath)
        vocab = data.load_vocab(vpath)
        loaded = data.load_corpus(path, vocab)
        assert loaded == c

    def test_load_corpus_bad_line(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("w0 w1\n")  # missing tab
        with pytest.raises(DataError):
            data.load_corpus(p, Vocabulary.synthetic(10))
