"""Hybrid-regressive translation: a desk-scale encoder-decoder that drafts
every k-th token causally and fills the rest with one parallel decoder call.
"""

from .data import (
    BOS, BOS_K, EOS, MASK, PAD, Corpus, SentencePair, Vocabulary,
    generate_synthetic, load_corpus, load_vocab, save_corpus, save_vocab,
)
from .model import ModelConfig, TransformerModel
from .checkpoint import load_model, save_checkpoint
from .training import CurriculumSchedule, distill_corpus, finetune_from_at, train
from .infer import InferenceSession, estimate_max_bytes, make_arena
from .arena import Arena, Workspace
from .decoding import Translation, at_translate, hrt_translate
from .bench import bleu, evaluate, measure_wps, sequence_accuracy
from .kernels import USING_COMPILED, backend_name

__version__ = "0.1.0"

__all__ = [
    "PAD", "BOS", "EOS", "MASK", "BOS_K",
    "Vocabulary", "SentencePair", "Corpus", "generate_synthetic",
    "save_corpus", "load_corpus", "save_vocab", "load_vocab",
    "ModelConfig", "TransformerModel", "save_checkpoint", "load_model",
    "CurriculumSchedule", "train", "finetune_from_at", "distill_corpus",
    "InferenceSession", "estimate_max_bytes", "make_arena",
    "Arena", "Workspace",
    "Translation", "at_translate", "hrt_translate",
    "measure_wps", "evaluate", "bleu", "sequence_accuracy",
    "USING_COMPILED", "backend_name",
]
