"""Graph-free inference engine with KV caching and arena-backed activations.

All per-decode activation buffers come from a Workspace (arena-backed in
production). Each phase (encoder, skip-at, skip-cmlm) allocates its buffer
plan once after an arena reset; the plan functions below double as the
closed-form memory estimator, so the high-water audit is exact by
construction. Encoder memory and the per-layer cross-attention projections
live in small persistent per-session buffers (sized once at max length, like
parameter storage) because they must survive phase resets.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .arena import Arena, Workspace, _aligned
from .model import ModelConfig, TransformerModel, positional_encoding_table


class InferenceError(RuntimeError):
    pass


# -----------------------------------------------------------------------------
# buffer plans (shared by the engine and the memory estimator)
# -----------------------------------------------------------------------------


def encoder_plan(c: ModelConfig, s_len):
    d, f, h, dh = c.d_model, c.d_ff, c.n_heads, c.d_head
    return {
        "x": (s_len, d), "y": (s_len, d),
        "q": (s_len, d), "k": (s_len, d), "v": (s_len, d), "t1": (s_len, d),
        "scores": (h, s_len, s_len), "ctxh": (h, s_len, dh),
        "ff1": (s_len, f),
    }


def incremental_plan(c: ModelConfig, beam, cache_cap, s_len):
    d, f, h = c.d_model, c.d_ff, c.n_heads
    plan = {}
    for i in range(c.dec_layers):
        for n in ("cache_k", "cache_v", "cache_k_alt", "cache_v_alt"):
            plan[f"{n}.{i}"] = (beam, cache_cap, d)
    plan.update({
        "x": (beam, d), "y": (beam, d),
        "q": (beam, d), "k": (beam, d), "v": (beam, d), "t1": (beam, d),
        "scores": (beam, h, cache_cap), "scores_c": (beam, h, s_len),
        "ff1": (beam, f), "logits": (beam, c.vocab_size), "logp": (beam, c.vocab_size),
        "red1": (beam, h, 1), "red2": (beam, h, 1),
        "redv1": (beam, 1), "redv2": (beam, 1),
    })
    return plan


def parallel_plan(c: ModelConfig, batch, t_len, s_len):
    d, f, h, dh = c.d_model, c.d_ff, c.n_heads, c.d_head
    return {
        "x": (batch, t_len, d), "y": (batch, t_len, d),
        "q": (batch, t_len, d), "k": (batch, t_len, d), "v": (batch, t_len, d),
        "t1": (batch, t_len, d),
        "scores": (batch, h, t_len, t_len), "ctxh": (batch, h, t_len, dh),
        "scores_c": (batch, h, t_len, s_len),
        "ff1": (batch, t_len, f), "logits": (batch, t_len, c.vocab_size),
        "bias_tt": (1, 1, t_len, t_len), "bias_bt": (batch, 1, 1, t_len),
        "redA": (batch, t_len, 1), "redB": (batch, t_len, 1),
    }


def _plan_bytes(plan, dtype):
    itemsize = np.dtype(dtype).itemsize
    return sum(_aligned(int(np.prod(shape)) * itemsize) for shape in plan.values())


def estimate_max_bytes(config, max_len=None, k=2, b_at=1, b_nat=1,
                       dtype=np.float32, mode="hrt"):
    """Worst-case per-phase activation bytes and the overall arena capacity."""
    c = config
    L = c.max_len if max_len is None else max_len
    phases = {"encoder": _plan_bytes(encoder_plan(c, L), dtype)}
    if mode == "hrt":
        m_max = math.ceil(L / k)
        phases["skip-at"] = _plan_bytes(incremental_plan(c, b_at, m_max + 1, L), dtype)
        t_max = k * m_max
        fill = parallel_plan(c, b_nat, t_max, L)
        phases["skip-cmlm"] = _plan_bytes(fill, dtype) + _aligned(
            b_nat * t_max * np.dtype(np.intp).itemsize  # argmax indices
        )
    elif mode == "at":
        phases["skip-at"] = _plan_bytes(incremental_plan(c, b_at, L + 1, L), dtype)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    phases["max"] = max(phases.values())
    return phases


def make_arena(config, max_len=None, k=2, b_at=1, b_nat=1, dtype=np.float32, mode="hrt"):
    return Arena(estimate_max_bytes(config, max_len, k, b_at, b_nat, dtype, mode)["max"])


# -----------------------------------------------------------------------------
# decoder cache
# -----------------------------------------------------------------------------


class DecoderCache:
    """Per-layer cached self-attention K/V for one in-flight causal decode."""

    def __init__(self, session, beam, cache_cap, bufs):
        self.session = session
        self.beam = beam
        self.cap = cache_cap
        self.bufs = bufs
        self.length = 0  # cached steps
        self.last_position = None
        self.memory = session.memory[: session.src_len]  # encoder memory ref
        n = session.config.dec_layers
        self.keys = [bufs[f"cache_k.{i}"] for i in range(n)]
        self.values = [bufs[f"cache_v.{i}"] for i in range(n)]
        self.keys_alt = [bufs[f"cache_k_alt.{i}"] for i in range(n)]
        self.values_alt = [bufs[f"cache_v_alt.{i}"] for i in range(n)]


# -----------------------------------------------------------------------------
# session
# -----------------------------------------------------------------------------


def _softmax_inplace(x, red_max, red_sum):
    np.amax(x, axis=-1, keepdims=True, out=red_max)
    np.subtract(x, red_max, out=x)
    np.exp(x, out=x)
    np.sum(x, axis=-1, keepdims=True, out=red_sum)
    np.divide(x, red_sum, out=x)


class InferenceSession:
    """Float32 (or float64) forward-only twin of TransformerModel."""

    def __init__(self, model: TransformerModel, dtype=np.float32):
        c = model.config
        self.config = c
        self.dtype = np.dtype(dtype)
        self.p = {
            name: np.ascontiguousarray(p.data, dtype=self.dtype)
            for name, p in model.params.items()
        }
        self.pe = positional_encoding_table(
            c.max_len + max(c.chunk_sizes) + 1, c.d_model, self.dtype
        )
        self.scale = math.sqrt(c.d_model)
        self.att_scale = 1.0 / math.sqrt(c.d_head)
        # persistent handoff buffers (survive phase resets within a sentence)
        self.memory = np.empty((c.max_len, c.d_model), dtype=self.dtype)
        self.cross_k = np.empty((c.dec_layers, c.max_len, c.d_model), dtype=self.dtype)
        self.cross_v = np.empty_like(self.cross_k)
        self.src_len = 0
        self.decoder_calls = 0  # running counter, reset by callers as needed

    # -- small helpers ----------------------------------------------------

    def _ln(self, x2d, prefix, out):
        kernels.layer_norm_fwd(x2d, self.p[f"{prefix}.g"], self.p[f"{prefix}.b"], out=out)
        return out

    def _linear(self, x, prefix, w, b, out):
        np.matmul(x, self.p[f"{prefix}.{w}"], out=out)
        out += self.p[f"{prefix}.{b}"]
        return out

    # -- encoder ----------------------------------------------------------

    def encode(self, src_ids, ws: Workspace):
        """Run the encoder and cache memory + cross projections; returns memory."""
        c = self.config
        src_ids = np.asarray(src_ids, dtype=np.int64)
        s = len(src_ids)
        if s > c.max_len:
            raise InferenceError(f"source length {s} exceeds max_len {c.max_len}")
        ws.reset("encoder")
        B = {name: ws.buf(shape, self.dtype) for name, shape in encoder_plan(c, s).items()}
        h, dh = c.n_heads, c.d_head
        x, y = B["x"], B["y"]
        np.take(self.p["embed"], src_ids, axis=0, out=x)
        x *= self.scale
        x += self.pe[:s]
        for i in range(c.enc_layers):
            pre = f"enc.{i}"
            self._ln(x, f"{pre}.ln1", y)
            q = self._linear(y, f"{pre}.attn", "wq", "bq", B["q"])
            k = self._linear(y, f"{pre}.attn", "wk", "bk", B["k"])
            v = self._linear(y, f"{pre}.attn", "wv", "bv", B["v"])
            qh = q.reshape(s, h, dh).transpose(1, 0, 2)
            kh = k.reshape(s, h, dh).transpose(1, 2, 0)
            vh = v.reshape(s, h, dh).transpose(1, 0, 2)
            np.matmul(qh, kh, out=B["scores"])
            B["scores"] *= self.att_scale
            kernels.softmax_lastaxis(B["scores"], out=B["scores"])
            np.matmul(B["scores"], vh, out=B["ctxh"])
            B["t1"].reshape(s, h, dh)[:] = B["ctxh"].transpose(1, 0, 2)
            self._linear(B["t1"], f"{pre}.attn", "wo", "bo", y)
            x += y
            self._ln(x, f"{pre}.ln2", y)
            np.matmul(y, self.p[f"{pre}.ffn.w1"], out=B["ff1"])
            B["ff1"] += self.p[f"{pre}.ffn.b1"]
            np.maximum(B["ff1"], 0.0, out=B["ff1"])
            np.matmul(B["ff1"], self.p[f"{pre}.ffn.w2"], out=y)
            y += self.p[f"{pre}.ffn.b2"]
            x += y
        self._ln(x, "enc.final_ln", y)
        self.memory[:s] = y
        self.src_len = s
        for i in range(c.dec_layers):
            self._linear(y, f"dec.{i}.cross", "wk", "bk", B["q"])
            self.cross_k[i, :s] = B["q"]
            self._linear(y, f"dec.{i}.cross", "wv", "bv", B["q"])
            self.cross_v[i, :s] = B["q"]
        return self.memory[:s]

    # -- incremental causal decoding ---------------------------------------

    def start_cache(self, beam, cache_cap, ws: Workspace, phase="skip-at"):
        c = self.config
        ws.reset(phase)
        bufs = {
            name: ws.buf(shape, self.dtype)
            for name, shape in incremental_plan(c, beam, cache_cap, self.src_len).items()
        }
        return DecoderCache(self, beam, cache_cap, bufs)

    def step(self, cache: DecoderCache, tokens, position):
        """Feed one token per beam at `position`; returns (beam, V) log-probs.

        The returned array is a reused buffer: copy out anything kept across
        steps.
        """
        c = self.config
        if cache.last_position is not None and position <= cache.last_position:
            raise InferenceError("new position must exceed all cached positions")
        t = cache.length
        if t >= cache.cap:
            raise InferenceError("decoder cache capacity exceeded")
        b, h, dh, s = cache.beam, c.n_heads, c.d_head, self.src_len
        B = cache.bufs
        x, y = B["x"], B["y"]
        tokens = np.asarray(tokens, dtype=np.int64)
        np.take(self.p["embed"], tokens, axis=0, out=x)
        x *= self.scale
        x += self.pe[position]
        for i in range(c.dec_layers):
            pre = f"dec.{i}"
            self._ln(x, f"{pre}.ln1", y)
            q = self._linear(y, f"{pre}.attn", "wq", "bq", B["q"])
            self._linear(y, f"{pre}.attn", "wk", "bk", B["k"])
            self._linear(y, f"{pre}.attn", "wv", "bv", B["v"])
            cache.keys[i][:, t] = B["k"]
            cache.values[i][:, t] = B["v"]
            kcur = cache.keys[i][:, : t + 1].reshape(b, t + 1, h, dh)
            vcur = cache.values[i][:, : t + 1].reshape(b, t + 1, h, dh)
            sc = B["scores"][:, :, : t + 1]
            np.einsum("bhd,bthd->bht", q.reshape(b, h, dh), kcur, out=sc)
            sc *= self.att_scale
            _softmax_inplace(sc, B["red1"], B["red2"])
            np.einsum("bht,bthd->bhd", sc, vcur, out=B["t1"].reshape(b, h, dh))
            self._linear(B["t1"], f"{pre}.attn", "wo", "bo", y)
            x += y
            # cross attention over the cached encoder projections
            self._ln(x, f"{pre}.ln2", y)
            q = self._linear(y, f"{pre}.cross", "wq", "bq", B["q"])
            scc = B["scores_c"]
            np.einsum(
                "bhd,shd->bhs", q.reshape(b, h, dh),
                self.cross_k[i, :s].reshape(s, h, dh), out=scc,
            )
            scc *= self.att_scale
            _softmax_inplace(scc, B["red1"], B["red2"])
            np.einsum(
                "bhs,shd->bhd", scc, self.cross_v[i, :s].reshape(s, h, dh),
                out=B["t1"].reshape(b, h, dh),
            )
            self._linear(B["t1"], f"{pre}.cross", "wo", "bo", y)
            x += y
            self._ln(x, f"{pre}.ln3", y)
            np.matmul(y, self.p[f"{pre}.ffn.w1"], out=B["ff1"])
            B["ff1"] += self.p[f"{pre}.ffn.b1"]
            np.maximum(B["ff1"], 0.0, out=B["ff1"])
            np.matmul(B["ff1"], self.p[f"{pre}.ffn.w2"], out=y)
            y += self.p[f"{pre}.ffn.b2"]
            x += y
        self._ln(x, "dec.final_ln", y)
        logits, logp = B["logits"], B["logp"]
        np.matmul(y, self.p["embed"].T, out=logits)
        np.amax(logits, axis=-1, keepdims=True, out=B["redv1"])
        np.subtract(logits, B["redv1"], out=logp)
        np.exp(logp, out=logits)  # logits becomes scratch
        np.sum(logits, axis=-1, keepdims=True, out=B["redv2"])
        np.log(B["redv2"], out=B["redv2"])
        logp -= B["redv2"]
        cache.length = t + 1
        cache.last_position = position
        self.decoder_calls += 1
        return logp

    def reorder(self, cache: DecoderCache, parents):
        """Rearrange beams so row j continues from old row parents[j]."""
        parents = list(parents)
        if parents == list(range(cache.beam)):
            return
        t = cache.length
        for i in range(self.config.dec_layers):
            for j, pj in enumerate(parents):
                cache.keys_alt[i][j, :t] = cache.keys[i][pj, :t]
                cache.values_alt[i][j, :t] = cache.values[i][pj, :t]
        cache.keys, cache.keys_alt = cache.keys_alt, cache.keys
        cache.values, cache.values_alt = cache.values_alt, cache.values

    # -- one-shot parallel decoding ----------------------------------------

    def parallel_logits(self, ids, positions, mode, ws: Workspace,
                        pad_mask=None, phase="skip-cmlm"):
        """Single parallel decoder pass; returns (B, T, V) logits.

        pad_mask (B, T): True where the input token is real. Pad keys are
        hidden from self-attention; pad rows produce ignorable outputs.
        """
        c = self.config
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        positions = np.atleast_2d(np.asarray(positions, dtype=np.int64))
        bsz, t_len = ids.shape
        s = self.src_len
        ws.reset(phase)
        B = {
            name: ws.buf(shape, self.dtype)
            for name, shape in parallel_plan(c, bsz, t_len, s).items()
        }
        amax = ws.buf((bsz, t_len), np.intp)
        h, dh = c.n_heads, c.d_head
        x, y = B["x"], B["y"]
        x2d = x.reshape(bsz * t_len, c.d_model)
        y2d = y.reshape(bsz * t_len, c.d_model)
        np.take(self.p["embed"], ids.reshape(-1), axis=0, out=x2d)
        x *= self.scale
        np.take(self.pe, positions.reshape(-1), axis=0, out=B["t1"].reshape(-1, c.d_model))
        x += B["t1"]
        bias_tt, bias_bt = B["bias_tt"], B["bias_bt"]
        bias_tt[...] = 0.0
        if mode == "causal":
            iu = np.triu_indices(t_len, k=1)
            bias_tt[0, 0][iu] = -1e9
        elif mode != "full":
            raise InferenceError(f"unknown mode {mode!r}")
        bias_bt[...] = 0.0
        if pad_mask is not None:
            bias_bt[:, 0, 0, :][~np.asarray(pad_mask, dtype=bool)] = -1e9
        for i in range(c.dec_layers):
            pre = f"dec.{i}"
            self._ln(x2d, f"{pre}.ln1", y2d)
            q = self._linear(y2d, f"{pre}.attn", "wq", "bq", B["q"].reshape(-1, c.d_model))
            k = self._linear(y2d, f"{pre}.attn", "wk", "bk", B["k"].reshape(-1, c.d_model))
            v = self._linear(y2d, f"{pre}.attn", "wv", "bv", B["v"].reshape(-1, c.d_model))
            qh = q.reshape(bsz, t_len, h, dh).transpose(0, 2, 1, 3)
            kh = k.reshape(bsz, t_len, h, dh).transpose(0, 2, 3, 1)
            vh = v.reshape(bsz, t_len, h, dh).transpose(0, 2, 1, 3)
            np.matmul(qh, kh, out=B["scores"])
            B["scores"] *= self.att_scale
            B["scores"] += bias_tt
            B["scores"] += bias_bt
            kernels.softmax_lastaxis(B["scores"], out=B["scores"])
            np.matmul(B["scores"], vh, out=B["ctxh"])
            B["t1"].reshape(bsz, t_len, h, dh)[:] = B["ctxh"].transpose(0, 2, 1, 3)
            self._linear(B["t1"].reshape(-1, c.d_model), f"{pre}.attn", "wo", "bo", y2d)
            x += y
            self._ln(x2d, f"{pre}.ln2", y2d)
            q = self._linear(y2d, f"{pre}.cross", "wq", "bq", B["q"].reshape(-1, c.d_model))
            qh = q.reshape(bsz, t_len, h, dh).transpose(0, 2, 1, 3)
            ckh = self.cross_k[i, :s].reshape(s, h, dh).transpose(1, 2, 0)
            cvh = self.cross_v[i, :s].reshape(s, h, dh).transpose(1, 0, 2)
            np.matmul(qh, ckh, out=B["scores_c"])
            B["scores_c"] *= self.att_scale
            kernels.softmax_lastaxis(B["scores_c"], out=B["scores_c"])
            np.matmul(B["scores_c"], cvh, out=B["ctxh"])
            B["t1"].reshape(bsz, t_len, h, dh)[:] = B["ctxh"].transpose(0, 2, 1, 3)
            self._linear(B["t1"].reshape(-1, c.d_model), f"{pre}.cross", "wo", "bo", y2d)
            x += y
            self._ln(x2d, f"{pre}.ln3", y2d)
            np.matmul(y2d, self.p[f"{pre}.ffn.w1"], out=B["ff1"].reshape(-1, c.d_ff))
            B["ff1"] += self.p[f"{pre}.ffn.b1"]
            np.maximum(B["ff1"], 0.0, out=B["ff1"])
            np.matmul(B["ff1"].reshape(-1, c.d_ff), self.p[f"{pre}.ffn.w2"], out=y2d)
            y += self.p[f"{pre}.ffn.b2"]
            x += y
        self._ln(x2d, "dec.final_ln", y2d)
        np.matmul(y2d, self.p["embed"].T, out=B["logits"].reshape(bsz * t_len, -1))
        self.decoder_calls += 1
        self._last_parallel = (B, amax)  # fill helpers reuse these buffers
        return B["logits"]

    def argmax_logprobs(self, logits, exclude=None):
        """Per-position argmax token and its log-softmax value, buffer-reusing.

        `exclude` lists token ids barred from selection; their columns are
        driven to -1e9, so the returned log-probs renormalize over the rest.
        Destroys `logits`.
        """
        B, amax = self._last_parallel
        if exclude is not None:
            logits[..., list(exclude)] = -1e9
        np.argmax(logits, axis=-1, out=amax)
        # argmax value == row max, so chosen logprob = -log(sum exp(l - max))
        np.amax(logits, axis=-1, keepdims=True, out=B["redA"])
        np.subtract(logits, B["redA"], out=logits)
        np.exp(logits, out=logits)
        np.sum(logits, axis=-1, keepdims=True, out=B["redB"])
        np.log(B["redB"], out=B["redB"])
        return amax, -B["redB"][..., 0]
