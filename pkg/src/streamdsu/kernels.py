"""Dense kernels with hand-derived backward passes.

Every forward returns ``(out, ctx)`` where ``ctx`` holds what the matching
backward needs; backward functions take ``(dout, ctx)`` and return input
and parameter gradients. Kernels are pure: no state survives between calls
except the optional FLOP counter (see :mod:`streamdsu.tensor`).
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import GraphError, Param, check_finite, record_flops

LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _need(ctx, name):
    if ctx is None:
        raise GraphError(f"{name}: backward called before forward")


# -- matmul / linear ---------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, tag: str = "matmul") -> np.ndarray:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out = a @ b
    batch = int(np.prod(out.shape[:-2])) if out.ndim > 2 else 1
    record_flops(tag, 2 * batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return check_finite(out, "matmul")


def matmul_backward(dc: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of C = A @ B for 2-D operands: dA = dC Bᵀ, dB = Aᵀ dC."""
    return dc @ b.T, a.T @ dc


def linear(x, w, b, tag="linear"):
    out = matmul(x, w, tag)
    if b is not None:
        out = out + b
    return out, (x, w)


def linear_backward(dy, ctx):
    _need(ctx, "linear")
    x, w = ctx
    dx, dw = matmul_backward(dy, x, w)
    return dx, dw, dy.sum(axis=0)


# -- softmax ------------------------------------------------------------------

def softmax_masked(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0."""
    if mask is not None:
        if not np.all(np.any(mask, axis=-1)):
            raise ValueError("softmax_masked: a row has no allowed entry")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return check_finite(e / np.sum(e, axis=-1, keepdims=True), "softmax_masked")


def softmax_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    _need(y, "softmax")
    return y * (dy - np.sum(dy * y, axis=-1, keepdims=True))


# -- layernorm ----------------------------------------------------------------

def layernorm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return check_finite(xhat * gain + bias, "layernorm"), (xhat, inv, gain)


def layernorm_backward(dy, ctx):
    _need(ctx, "layernorm")
    xhat, inv, gain = ctx
    red = tuple(range(dy.ndim - 1))
    dgain = np.sum(dy * xhat, axis=red)
    dbias = np.sum(dy, axis=red)
    dxhat = dy * gain
    d = dy.shape[-1]
    dx = inv / d * (
        d * dxhat
        - np.sum(dxhat, axis=-1, keepdims=True)
        - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


# -- gelu ---------------------------------------------------------------------

def gelu(x):
    y = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return check_finite(y, "gelu"), x


def gelu_backward(dy, ctx):
    _need(ctx, "gelu")
    x = ctx
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


# -- convolutions ------------------------------------------------------------

def conv_out_len(length: int, kernel: int, stride: int, pad_left: int) -> int:
    padded = length + pad_left
    return 0 if padded < kernel else (padded - kernel) // stride + 1


def conv1d(x, w, b, stride, pad_left=0, tag="conv"):
    """Time-major 1-D convolution.

    x: (L, C_in); w: (K, C_in, C_out); b: (C_out,). Left zero padding only,
    so with ``pad_left = K - stride`` the layer is causal and maps L samples
    to ``L // stride`` outputs.
    """
    k, c_in, c_out = w.shape
    if x.ndim != 2 or x.shape[1] != c_in:
        raise ValueError(f"conv1d: input {x.shape} does not match weight {w.shape}")
    n_out = conv_out_len(x.shape[0], k, stride, pad_left)
    if n_out == 0:
        raise ValueError("conv1d: input shorter than the kernel")
    xp = np.concatenate([np.zeros((pad_left, c_in), x.dtype), x]) if pad_left else x
    cols = sliding_window_view(xp, k, axis=0)[: (n_out - 1) * stride + 1 : stride]
    # reshape can return a strided view here; BLAS needs a contiguous copy
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1)).reshape(n_out, k * c_in)
    out = matmul(cols, w.reshape(k * c_in, c_out), tag) + b
    return out, (cols, w, stride, pad_left, x.shape[0])


def conv1d_backward(dy, ctx):
    _need(ctx, "conv1d")
    cols, w, stride, pad_left, length = ctx
    k, c_in, c_out = w.shape
    w2 = w.reshape(k * c_in, c_out)
    dcols, dw2 = matmul_backward(dy, cols, w2)
    dcols = dcols.reshape(-1, k, c_in)
    n_out = dcols.shape[0]
    dxp = np.zeros((length + pad_left, c_in), dy.dtype)
    span = (n_out - 1) * stride + 1
    for j in range(k):
        dxp[j : j + span : stride] += dcols[:, j, :]
    return dxp[pad_left:], dw2.reshape(w.shape), dy.sum(axis=0)


def depthwise_conv1d(x, w, b, pad_left=None, tag="posconv"):
    """Per-channel 1-D convolution, stride 1. x: (T, C); w: (K, C); b: (C,).

    Default padding ``K - 1`` on the left makes it causal and length-preserving.
    """
    k, c = w.shape
    if x.ndim != 2 or x.shape[1] != c:
        raise ValueError(f"depthwise_conv1d: input {x.shape} does not match weight {w.shape}")
    pad_left = k - 1 if pad_left is None else pad_left
    xp = np.concatenate([np.zeros((pad_left, c), x.dtype), x])
    n_out = xp.shape[0] - k + 1
    out = np.zeros((n_out, c), np.result_type(x, w))
    for j in range(k):
        out += xp[j : j + n_out] * w[j]
    record_flops(tag, 2 * n_out * c * k)
    return check_finite(out + b, "depthwise_conv1d"), (xp, w, pad_left)


def depthwise_conv1d_backward(dy, ctx):
    _need(ctx, "depthwise_conv1d")
    xp, w, pad_left = ctx
    k = w.shape[0]
    n_out = dy.shape[0]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for j in range(k):
        dw[j] = np.sum(dy * xp[j : j + n_out], axis=0)
        dxp[j : j + n_out] += dy * w[j]
    return dxp[pad_left:], dw, dy.sum(axis=0)


# -- attention ----------------------------------------------------------------

def _split_heads(x, n_heads):
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def band_mask(n_frames: int, left: int, right: int) -> np.ndarray:
    """Validity of banded slots: row i, slot s covers frame i - left + s."""
    width = left + right + 1
    frame = np.arange(n_frames)[:, None] - left + np.arange(width)[None, :]
    return (frame >= 0) & (frame < n_frames)


def attention(q, k, v, n_heads, mask=None, band=None, tag="attention"):
    """Multi-head scaled dot-product attention over (T, d) projections.

    Either ``mask`` (T x T boolean, or None for unrestricted) or
    ``band = (left, right)`` for a bounded time-restricted window, which is
    computed over (T, left+right+1) score slots instead of T x T.
    FLOPs are recorded for allowed query/key pairs only.
    """
    t, d = q.shape
    if d % n_heads:
        raise ValueError("attention: model dim not divisible by heads")
    dh = d // n_heads
    scale = 1.0 / math.sqrt(dh)
    qh, kh, vh = (_split_heads(a, n_heads) for a in (q, k, v))
    if band is None:
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        probs = softmax_masked(scores, mask)
        ctx_h = probs @ vh
        allowed = t * t if mask is None else int(np.count_nonzero(mask))
        saved = ("dense", qh, kh, vh, probs, scale, None)
    else:
        left, right = band
        width = left + right + 1
        bm = band_mask(t, left, right)
        pad = lambda a: np.concatenate(
            [np.zeros((n_heads, left, dh), a.dtype), a, np.zeros((n_heads, right, dh), a.dtype)], axis=1
        )
        kwin = sliding_window_view(pad(kh), width, axis=1)  # (H, T, dh, W)
        vwin = sliding_window_view(pad(vh), width, axis=1)
        scores = (qh[:, :, None, :] @ kwin)[:, :, 0, :] * scale  # (H, T, W)
        probs = softmax_masked(scores, bm)
        ctx_h = (probs[:, :, None, :] @ vwin.transpose(0, 1, 3, 2))[:, :, 0, :]
        allowed = int(np.count_nonzero(bm))
        saved = ("band", qh, kwin, vwin, probs, scale, (left, right))
    record_flops(tag, 4 * dh * n_heads * allowed)
    return check_finite(_merge_heads(ctx_h), "attention"), saved


def attention_backward(dout, ctx):
    _need(ctx, "attention")
    kind, qh, kk, vv, probs, scale, band = ctx
    n_heads, t, dh = qh.shape
    dctx = _split_heads(dout, n_heads)
    if kind == "dense":
        dprobs = dctx @ vv.transpose(0, 2, 1)
        dvh = probs.transpose(0, 2, 1) @ dctx
        dscores = softmax_backward(dprobs, probs) * scale
        dqh = dscores @ kk
        dkh = dscores.transpose(0, 2, 1) @ qh
    else:
        left, right = band
        width = left + right + 1
        dprobs = (dctx[:, :, None, :] @ vv)[:, :, 0, :]
        dscores = softmax_backward(dprobs, probs) * scale
        dqh = (dscores[:, :, None, :] @ kk.transpose(0, 1, 3, 2))[:, :, 0, :]
        dkp = np.zeros((n_heads, t + width - 1, dh), dout.dtype)
        dvp = np.zeros_like(dkp)
        for s in range(width):
            dkp[:, s : s + t] += dscores[:, :, s, None] * qh
            dvp[:, s : s + t] += probs[:, :, s, None] * dctx
        dkh = dkp[:, left : left + t]
        dvh = dvp[:, left : left + t]
    return _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)


# -- losses / mixing ----------------------------------------------------------

def log_softmax(x):
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean cross-entropy of (N, V) logits against integer targets (N,)."""
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("cross_entropy: expected (N, V) logits and (N,) targets")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise ValueError("cross_entropy: target id out of range")
    logp = log_softmax(logits)
    n = logits.shape[0]
    loss = -float(np.mean(logp[np.arange(n), targets]))
    return check_finite(np.asarray(loss), "cross_entropy").item(), (logp, targets)


def cross_entropy_backward(dloss, ctx):
    _need(ctx, "cross_entropy")
    logp, targets = ctx
    n = logp.shape[0]
    g = np.exp(logp)
    g[np.arange(n), targets] -= 1.0
    return g * (dloss / n)


def softmax_weights(logits: np.ndarray) -> np.ndarray:
    return softmax_masked(logits)


def weighted_sum(stack, logits):
    """Σ_k softmax(logits)_k · stack[k] for stack of shape (L, T, F)."""
    if stack.shape[0] != logits.shape[0]:
        raise ValueError(f"weighted_sum: {stack.shape[0]} layers vs {logits.shape[0]} weights")
    w = softmax_weights(logits)
    return np.tensordot(w, stack, axes=1), (stack, w)


def weighted_sum_backward(dy, ctx):
    _need(ctx, "weighted_sum")
    stack, w = ctx
    dstack = w[:, None, None] * dy[None]
    dw = np.tensordot(stack, dy, axes=([1, 2], [0, 1]))
    return dstack, softmax_backward(dw, w)


# -- optimizer ----------------------------------------------------------------

def adamw_step(params: dict[str, Param], state: dict, lr: float, weight_decay: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               lr_scale: dict[str, float] | None = None) -> None:
    """Decoupled-weight-decay Adam update applied in place to ``params``.

    ``lr_scale`` multiplies the step size of the named parameters.
    """
    step = state.get("step", 0) + 1
    state["step"] = step
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, p in params.items():
        g = p.grad
        if name not in m:
            m[name] = np.zeros_like(p.value)
            v[name] = np.zeros_like(p.value)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        update = (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)
        step_lr = lr * (lr_scale or {}).get(name, 1.0)
        p.value -= (step_lr * (update + weight_decay * p.value)).astype(p.value.dtype)
        check_finite(p.value, f"adamw:{name}")
