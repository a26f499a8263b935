"""Minimal reverse-mode autodiff over dense numpy arrays.

Training runs in float64 so finite-difference gradient checks are meaningful;
the separate inference engine (hrt.infer) runs graph-free in float32.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels

# When True, every op asserts its output is finite. Off by default: the
# training loop checks the loss each step, which catches divergence cheaply.
CHECK_FINITE = False

MASK_NEG = -1e9  # additive attention mask value for disallowed entries


class GraphError(RuntimeError):
    """Backward called on a tensor with no attached graph."""


def _check(data):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor op")
    return data


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus (optionally) a reverse-mode graph node."""

    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, data, parents=(), backward=None, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of self (a scalar) into every reachable node."""
        if self.data.size != 1:
            raise GraphError("backward requires a scalar loss")
        if not self.requires_grad or (self._backward is None and not self._parents):
            raise GraphError("backward on a detached graph")
        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
            if node is not self:
                # free intermediate grads/graph as we go
                node._backward = None
        _check(self.grad)

    def _accum(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """Trainable tensor with persistent gradient and Adam moment buffers."""

    __slots__ = ("m", "v", "t")

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.t = 0

    def _accum(self, grad):
        self.grad += grad

    def zero_grad(self):
        self.grad[...] = 0.0


def _wrap(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


# -----------------------------------------------------------------------------
# primitive ops
# -----------------------------------------------------------------------------


def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = _check(a.data + b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_data = _check(a.data * b.data)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def matmul(a, b):
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _wrap(a), _wrap(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    out_data = _check(a.data @ b.data)

    def backward(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            a._accum(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            b._accum(_unbroadcast(gb, b.data.shape))

    return Tensor(out_data, (a, b), backward)


def relu(x):
    x = _wrap(x)
    out_data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accum(g * (x.data > 0))

    return Tensor(out_data, (x,), backward)


def reshape(x, shape):
    x = _wrap(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accum(g.reshape(x.data.shape))

    return Tensor(out_data, (x,), backward)


def transpose(x, axes):
    x = _wrap(x)
    out_data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accum(g.transpose(inv))

    return Tensor(out_data, (x,), backward)


def mean_all(x):
    x = _wrap(x)
    n = x.data.size
    out_data = np.asarray(x.data.mean())

    def backward(g):
        if x.requires_grad:
            x._accum(np.full_like(x.data, g / n))

    return Tensor(out_data, (x,), backward)


def softmax(x, axis=-1):
    """Numerically stable softmax along `axis`."""
    x = _wrap(x)
    if axis != -1 and axis != x.data.ndim - 1:
        order = list(range(x.data.ndim))
        order[axis], order[-1] = order[-1], order[axis]
        return transpose(softmax(transpose(x, order), -1), order)
    s = _check(kernels.softmax_lastaxis(x.data))

    def backward(g):
        if x.requires_grad:
            gs = g * s
            x._accum(gs - s * gs.sum(axis=-1, keepdims=True))

    return Tensor(s, (x,), backward)


def layer_norm(x, gain, bias):
    """Zero mean / unit variance over the last axis (eps=1e-5), then affine."""
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layer_norm gain/bias must match the last axis")
    out_data, mean, inv_std = kernels.layer_norm_fwd(x.data, gain.data, bias.data)
    _check(out_data)
    xhat = (x.data - mean) * inv_std

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gd = g * gain.data
            mean_gd = gd.mean(axis=-1, keepdims=True)
            mean_gd_xhat = (gd * xhat).mean(axis=-1, keepdims=True)
            x._accum(inv_std * (gd - mean_gd - xhat * mean_gd_xhat))

    return Tensor(out_data, (x, gain, bias), backward)


def embedding(table, ids):
    """Row gather from a (vocab, d) table; gradient is a scatter-add."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            table._accum(acc)

    return Tensor(out_data, (table,), backward)


def scaled_dot_attention(q, k, v, allowed):
    """softmax(q k^T / sqrt(d_head) + mask) v with boolean `allowed` mask.

    `allowed` broadcasts to (..., q_len, k_len); disallowed entries get a large
    negative additive bias. A query row with no allowed key is an error.
    """
    q, k, v = _wrap(q), _wrap(k), _wrap(v)
    if q.data.shape[-1] != k.data.shape[-1]:
        raise ValueError("q/k head dimensions disagree")
    if k.data.shape[-2] != v.data.shape[-2]:
        raise ValueError("k/v lengths disagree")
    allowed = np.asarray(allowed, dtype=bool)
    if not np.broadcast_to(allowed, q.data.shape[:-1] + (k.data.shape[-2],)).any(
        axis=-1
    ).all():
        raise ValueError("fully masked attention query row")
    scale = 1.0 / math.sqrt(q.data.shape[-1])
    scores = matmul(mul(q, scale), transpose_last2(k))
    bias = np.where(allowed, 0.0, MASK_NEG).astype(q.data.dtype)
    probs = softmax(add(scores, Tensor(bias)), axis=-1)
    return matmul(probs, v)


def transpose_last2(x):
    x = _wrap(x)
    axes = list(range(x.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def cross_entropy_masked(logits, targets, loss_mask):
    """Mean NLL over positions where loss_mask is true.

    logits: (..., V); targets/loss_mask: (...). Masked-out positions contribute
    exactly zero loss and zero gradient.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if targets.shape != logits.data.shape[:-1] or loss_mask.shape != targets.shape:
        raise ValueError("targets/loss_mask must match logits leading shape")
    n = int(loss_mask.sum())
    if n == 0:
        raise ValueError("cross_entropy_masked: all positions masked out")
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    mflat = loss_mask.reshape(-1)
    mx = flat.max(axis=-1)
    lse = mx + np.log(np.exp(flat - mx[:, None]).sum(axis=-1))
    nll = lse - flat[np.arange(flat.shape[0]), tflat]
    loss = np.asarray(nll[mflat].sum() / n)
    _check(loss)

    def backward(g):
        if logits.requires_grad:
            p = kernels.softmax_lastaxis(flat)
            p[np.arange(flat.shape[0]), tflat] -= 1.0
            p *= (mflat / n * g).reshape(-1, 1)
            logits._accum(p.reshape(logits.data.shape))

    return Tensor(loss, (logits,), backward)


# -----------------------------------------------------------------------------
# optimizer
# -----------------------------------------------------------------------------


def adam_step(params, lr, beta1=0.9, beta2=0.98, eps=1e-9):
    """Standard Adam update over `params`; zeroes gradients afterwards."""
    for p in params:
        p.t += 1
        kernels.adam_update(p.data, p.grad, p.m, p.v, p.t, lr, beta1, beta2, eps)


def noam_lr(step, d_model, warmup=4000, factor=1.0):
    """Inverse-sqrt schedule with linear warmup (the standard base recipe)."""
    step = max(step, 1)
    return factor * d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)
