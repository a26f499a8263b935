"""Pre-norm transformer: shared encoder + one decoder with two masking modes.

The decoder runs either causally (skip-autoregressive phase) or fully
bidirectionally (skip-CMLM phase) over the SAME parameter set; only the
self-attention mask differs. Token positions are explicit and need not be
contiguous, so sinusoidal embeddings are evaluated at arbitrary integers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .data import SUPPORTED_K
from .numerics import Parameter, Tensor


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 1
    vocab_size: int = 71
    max_len: int = 200
    chunk_sizes: tuple = tuple(SUPPORTED_K)

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError("d_model must be divisible by n_heads")
        if self.dec_layers < 1:
            raise ModelError("dec_layers must be >= 1")

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return {
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "enc_layers": self.enc_layers,
            "dec_layers": self.dec_layers,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "chunk_sizes": list(self.chunk_sizes),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["chunk_sizes"] = tuple(d.get("chunk_sizes", SUPPORTED_K))
        return cls(**d)


@dataclass
class PositionedSequence:
    """Token ids paired with explicit (strictly increasing) integer positions."""

    ids: list
    positions: list

    def __post_init__(self):
        if len(self.ids) != len(self.positions):
            raise ModelError("ids/positions length mismatch")
        if any(b <= a for a, b in zip(self.positions, self.positions[1:])):
            raise ModelError("positions must be strictly increasing")

    def __len__(self):
        return len(self.ids)


@dataclass
class AttentionMask:
    """Self-attention visibility: causal (j <= i) or full, minus padding."""

    mode: str  # "causal" | "full"
    allowed: np.ndarray  # boolean, broadcastable to (..., q_len, k_len)

    @classmethod
    def build(cls, mode, q_len, k_len=None, key_padding=None):
        k_len = q_len if k_len is None else k_len
        if mode == "causal":
            allowed = np.tril(np.ones((q_len, k_len), dtype=bool))
        elif mode == "full":
            allowed = np.ones((q_len, k_len), dtype=bool)
        else:
            raise ModelError(f"unknown attention mode {mode!r}")
        if key_padding is not None:
            # key_padding: (..., k_len) True where the key is a real token
            allowed = allowed & np.asarray(key_padding, dtype=bool)[..., None, :]
        return cls(mode, allowed)


def positional_encoding_table(n_positions, d_model, dtype=np.float64):
    """Standard sinusoidal table, rows indexed by absolute position."""
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    table = np.zeros((n_positions, d_model), dtype=dtype)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


class TransformerModel:
    """Encoder/decoder with tied embeddings and shared two-mode decoder."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        self._init_params(rng)
        # table covers the grid EOS landing just past max_len
        self.pe = positional_encoding_table(
            config.max_len + max(config.chunk_sizes) + 1, config.d_model
        )

    # -- construction ------------------------------------------------------

    def _add(self, name, shape, rng, kind="weight"):
        if kind == "weight":
            std = math.sqrt(2.0 / (shape[0] + shape[1]))
            data = rng.normal(0.0, std, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, self.config.d_model**-0.5, size=shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            raise AssertionError(kind)
        p = Parameter(data)
        self.params[name] = p
        return p

    def _init_params(self, rng):
        c = self.config
        d, f = c.d_model, c.d_ff
        self._add("embed", (c.vocab_size, d), rng, "embed")

        def attn_block(prefix):
            for n in ("wq", "wk", "wv", "wo"):
                self._add(f"{prefix}.{n}", (d, d), rng)
            for n in ("bq", "bk", "bv", "bo"):
                self._add(f"{prefix}.{n}", (d,), rng, "zeros")

        def ln_block(prefix):
            self._add(f"{prefix}.g", (d,), rng, "ones")
            self._add(f"{prefix}.b", (d,), rng, "zeros")

        def ffn_block(prefix):
            self._add(f"{prefix}.w1", (d, f), rng)
            self._add(f"{prefix}.b1", (f,), rng, "zeros")
            self._add(f"{prefix}.w2", (f, d), rng)
            self._add(f"{prefix}.b2", (d,), rng, "zeros")

        for i in range(c.enc_layers):
            ln_block(f"enc.{i}.ln1")
            attn_block(f"enc.{i}.attn")
            ln_block(f"enc.{i}.ln2")
            ffn_block(f"enc.{i}.ffn")
        ln_block("enc.final_ln")

        for i in range(c.dec_layers):
            ln_block(f"dec.{i}.ln1")
            attn_block(f"dec.{i}.attn")
            ln_block(f"dec.{i}.ln2")
            attn_block(f"dec.{i}.cross")
            ln_block(f"dec.{i}.ln3")
            ffn_block(f"dec.{i}.ffn")
        ln_block("dec.final_ln")

    def parameters(self):
        return list(self.params.values())

    @property
    def n_params(self):
        return sum(p.data.size for p in self.params.values())

    # -- forward helpers -----------------------------------------------------

    def _linear(self, x, prefix, w, b):
        return nm.add(nm.matmul(x, self.params[f"{prefix}.{w}"]), self.params[f"{prefix}.{b}"])

    def _heads(self, x, batch, t):
        c = self.config
        return nm.transpose(nm.reshape(x, (batch, t, c.n_heads, c.d_head)), (0, 2, 1, 3))

    def _attention(self, prefix, x_q, x_kv, allowed):
        b, tq = x_q.shape[0], x_q.shape[1]
        tk = x_kv.shape[1]
        q = self._heads(self._linear(x_q, prefix, "wq", "bq"), b, tq)
        k = self._heads(self._linear(x_kv, prefix, "wk", "bk"), b, tk)
        v = self._heads(self._linear(x_kv, prefix, "wv", "bv"), b, tk)
        ctx = nm.scaled_dot_attention(q, k, v, allowed)
        merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, tq, self.config.d_model))
        return self._linear(merged, prefix, "wo", "bo")

    def _ffn(self, prefix, x):
        h = nm.relu(self._linear(x, prefix, "w1", "b1"))
        return self._linear(h, prefix, "w2", "b2")

    def _ln(self, prefix, x):
        return nm.layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _embed(self, ids, positions):
        x = nm.mul(nm.embedding(self.params["embed"], ids), math.sqrt(self.config.d_model))
        return nm.add(x, Tensor(self.pe[positions]))

    # -- public forward -------------------------------------------------------

    def encode(self, src_ids, src_key_mask=None):
        """src_ids: (B, S) int array; returns (B, S, d_model) memory."""
        src_ids = np.atleast_2d(np.asarray(src_ids, dtype=np.int64))
        b, s = src_ids.shape
        if s > self.config.max_len:
            raise ModelError(f"source length {s} exceeds max_len {self.config.max_len}")
        positions = np.broadcast_to(np.arange(s), (b, s))
        x = self._embed(src_ids, positions)
        allowed = AttentionMask.build("full", s, key_padding=src_key_mask).allowed
        if allowed.ndim == 3:
            allowed = allowed[:, None]  # broadcast over heads
        for i in range(self.config.enc_layers):
            y = self._ln(f"enc.{i}.ln1", x)
            x = nm.add(x, self._attention(f"enc.{i}.attn", y, y, allowed))
            x = nm.add(x, self._ffn(f"enc.{i}.ffn", self._ln(f"enc.{i}.ln2", x)))
        return self._ln("enc.final_ln", x)

    def decode_parallel(self, dec_ids, positions, memory, mode,
                        dec_key_mask=None, src_key_mask=None):
        """One parallel decoder pass; returns (B, T, vocab) logits.

        mode "causal": position i sees inputs j <= i only. mode "full": every
        non-padding input. Positions are explicit and may be non-contiguous.
        """
        dec_ids = np.atleast_2d(np.asarray(dec_ids, dtype=np.int64))
        positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
        b, t = dec_ids.shape
        # grids and the trailing EOS may run past max_len; the PE table is the
        # actual bound
        if positions.max() >= self.pe.shape[0]:
            raise ModelError(f"position {positions.max()} exceeds the positional table")
        x = self._embed(dec_ids, positions)
        self_allowed = AttentionMask.build(mode, t, key_padding=dec_key_mask).allowed
        if self_allowed.ndim == 3:
            self_allowed = self_allowed[:, None]
        s = memory.shape[1]
        cross_allowed = AttentionMask.build("full", t, s, key_padding=src_key_mask).allowed
        if cross_allowed.ndim == 3:
            cross_allowed = cross_allowed[:, None]
        for i in range(self.config.dec_layers):
            y = self._ln(f"dec.{i}.ln1", x)
            x = nm.add(x, self._attention(f"dec.{i}.attn", y, y, self_allowed))
            x = nm.add(x, self._attention(f"dec.{i}.cross", self._ln(f"dec.{i}.ln2", x), memory, cross_allowed))
            x = nm.add(x, self._ffn(f"dec.{i}.ffn", self._ln(f"dec.{i}.ln3", x)))
        x = self._ln("dec.final_ln", x)
        # tied input/output embedding
        return nm.matmul(x, nm.transpose_last2(self.params["embed"]))
