"""Hot numeric kernels with a compiled (Cython) core and a numpy fallback.

The compiled extension ``hrt._ckernels`` is built at install time. If it is
missing (or ``HRT_PURE_PYTHON=1`` is set) the numpy implementations below are
used instead; both produce identical results up to floating-point rounding of
the same operation order.
"""

import os

import numpy as np

__all__ = [
    "HAVE_COMPILED",
    "USING_COMPILED",
    "softmax_lastaxis",
    "layer_norm_fwd",
    "adam_update",
    "backend_name",
]

LN_EPS = 1e-5


# -----------------------------------------------------------------------------
# numpy reference implementations
# -----------------------------------------------------------------------------


def _softmax_lastaxis_np(x, out=None):
    """Stable softmax over the last axis."""
    if out is None:
        out = np.empty_like(x)
    m = x.max(axis=-1, keepdims=True)
    np.subtract(x, m, out=out)
    np.exp(out, out=out)
    s = out.sum(axis=-1, keepdims=True)
    out /= s
    return out


def _layer_norm_fwd_np(x, gain, bias, out=None):
    """Per-vector zero mean / unit variance over the last axis, then affine.

    Returns (out, mean, inv_std); mean/inv_std keep the last axis with size 1
    so the backward pass can reuse them.
    """
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    if out is None:
        out = np.empty_like(x)
    np.subtract(x, mean, out=out)
    out *= inv_std
    out *= gain
    out += bias
    return out, mean, inv_std


def _adam_update_np(value, grad, m, v, t, lr, beta1, beta2, eps):
    """In-place Adam step with bias correction; zeroes the gradient."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    value -= lr * mhat / (np.sqrt(vhat) + eps)
    grad[...] = 0.0


# -----------------------------------------------------------------------------
# backend selection
# -----------------------------------------------------------------------------

try:
    from . import _ckernels  # type: ignore[attr-defined]

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover - depends on build environment
    _ckernels = None
    HAVE_COMPILED = False

USING_COMPILED = HAVE_COMPILED and os.environ.get("HRT_PURE_PYTHON", "0") != "1"


def backend_name():
    return "compiled" if USING_COMPILED else "numpy"


def _compiled_softmax(x, out=None):
    if out is None:
        out = np.empty_like(x)
    # the reshape of a non-contiguous out would be a copy, so require it here
    if out.flags.c_contiguous and x.dtype in (np.float32, np.float64):
        flat_x = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
        _ckernels.softmax_rows(flat_x, out.reshape(-1, out.shape[-1]))
        return out
    return _softmax_lastaxis_np(x, out=out)


def _compiled_layer_norm(x, gain, bias, out=None):
    if out is None:
        out = np.empty_like(x)
    d = x.shape[-1]
    if (
        out.flags.c_contiguous
        and x.dtype in (np.float32, np.float64)
        and gain.dtype == x.dtype
        and gain.flags.c_contiguous
        and bias.flags.c_contiguous
    ):
        flat_x = np.ascontiguousarray(x.reshape(-1, d))
        mean = np.empty(flat_x.shape[0], dtype=flat_x.dtype)
        inv_std = np.empty(flat_x.shape[0], dtype=flat_x.dtype)
        _ckernels.layer_norm_rows(flat_x, gain, bias, out.reshape(-1, d), mean, inv_std, LN_EPS)
        shape = x.shape[:-1] + (1,)
        return out, mean.reshape(shape), inv_std.reshape(shape)
    return _layer_norm_fwd_np(x, gain, bias, out=out)


def _compiled_adam(value, grad, m, v, t, lr, beta1, beta2, eps):
    if value.flags.c_contiguous and value.dtype == np.float64:
        _ckernels.adam_update_flat(
            value.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
            t, lr, beta1, beta2, eps,
        )
        return
    _adam_update_np(value, grad, m, v, t, lr, beta1, beta2, eps)


if USING_COMPILED:
    softmax_lastaxis = _compiled_softmax
    layer_norm_fwd = _compiled_layer_norm
    adam_update = _compiled_adam
else:
    softmax_lastaxis = _softmax_lastaxis_np
    layer_norm_fwd = _layer_norm_fwd_np
    adam_update = _adam_update_np

# Always-available aliases, used by the kernel benchmark to compare backends.
softmax_lastaxis_numpy = _softmax_lastaxis_np
layer_norm_fwd_numpy = _layer_norm_fwd_np
adam_update_numpy = _adam_update_np
