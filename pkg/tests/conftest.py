"""Shared fixtures. The expensive trained models are session-scoped and lazy:
only the end-to-end acceptance tests request them."""

import time

import pytest

from hrt.checkpoint import save_checkpoint
from hrt.data import Corpus, generate_synthetic
from hrt.model import ModelConfig, TransformerModel
from hrt.training import CurriculumSchedule, finetune_from_at, train

# Desk-scale protocol: deep encoder, single decoder layer, d=64, 50k pairs.
# Target length 11 puts [EOS] at position 12, on the anchor grid of every
# chunk size in {2,3,4}, so the stage-II mask layouts match the training-time
# constructions for all three finetunes.
DESK_AT_STEPS = 3600
DESK_FT_STEPS = {2: 4000, 3: 2500, 4: 1600}
DESK_FT_HORIZON = 1200  # curriculum horizon; later steps are all skip-task
DESK_VOCAB = 71
DESK_BATCH = 32


@pytest.fixture(scope="session")
def budget():
    """Wall-clock ledger for the end-to-end training pipeline."""
    return {}


@pytest.fixture(scope="session")
def swap_data(budget):
    t0 = time.monotonic()
    corpus = generate_synthetic("mapped-swap", 51000, (11, 11), DESK_VOCAB,
                                seed=11)
    train_corpus = Corpus(corpus.pairs[:50000], corpus.vocab)
    held = Corpus(corpus.pairs[50000:], corpus.vocab)
    budget["generate"] = time.monotonic() - t0
    return train_corpus, held


@pytest.fixture(scope="session")
def at_baseline(swap_data, budget, tmp_path_factory):
    train_corpus, _ = swap_data
    t0 = time.monotonic()
    model = TransformerModel(ModelConfig(), seed=0)
    train(model, train_corpus, CurriculumSchedule(DESK_AT_STEPS),
          steps=DESK_AT_STEPS, k=2, batch_size=DESK_BATCH, seed=0, at_only=True)
    budget["at_train"] = time.monotonic() - t0
    path = tmp_path_factory.mktemp("ckpt") / "at.ckpt"
    save_checkpoint(model, str(path))
    return model, str(path)


def _finetune(k, swap_data, at_baseline, budget):
    train_corpus, _ = swap_data
    _, at_path = at_baseline
    t0 = time.monotonic()
    model, _ = finetune_from_at(
        at_path, train_corpus, CurriculumSchedule(DESK_FT_HORIZON),
        steps=DESK_FT_STEPS[k], k=k, batch_size=DESK_BATCH, seed=0)
    budget[f"finetune_k{k}"] = time.monotonic() - t0
    return model


@pytest.fixture(scope="session")
def hrt_k2(swap_data, at_baseline, budget):
    return _finetune(2, swap_data, at_baseline, budget)


@pytest.fixture(scope="session")
def hrt_k3(swap_data, at_baseline, budget):
    return _finetune(3, swap_data, at_baseline, budget)


@pytest.fixture(scope="session")
def hrt_k4(swap_data, at_baseline, budget):
    return _finetune(4, swap_data, at_baseline, budget)


@pytest.fixture(scope="session")
def tiny_trained():
    """Small copy-task model for exhaustive scoring oracles (8 word types)."""
    corpus = generate_synthetic("copy", 2000, (1, 6), 15, seed=3)
    cfg = ModelConfig(d_model=16, d_ff=64, n_heads=2, enc_layers=1,
                      dec_layers=1, vocab_size=15, max_len=6)
    model = TransformerModel(cfg, seed=5)
    train(model, corpus, CurriculumSchedule(500), steps=500, k=2,
          batch_size=16, seed=0)
    return model
