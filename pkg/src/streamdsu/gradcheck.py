"""Central finite differences for checking hand-written backward passes."""
from __future__ import annotations

from typing import Callable

import numpy as np


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """‖a − n‖ / max(‖a‖, ‖n‖); 0 when both vanish."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


# -- ready-made checks over random shapes ------------------------------------------
# Each returns {input name: relative error} for one seed (float64 throughout).

def _compare(loss, analytic: dict, wrt: dict) -> dict[str, float]:
    return {name: relative_error(analytic[name], numerical_grad(loss, arr)) for name, arr in wrt.items()}


def _linear(rng):
    from . import kernels as K

    m, k, n = rng.integers(1, 6, 3)
    x, w, b = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=n)
    r = rng.normal(size=(m, n))
    _, ctx = K.linear(x, w, b)
    dx, dw, db = K.linear_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.linear(x, w, b)[0] * r)), {"x": dx, "w": dw, "b": db},
                    {"x": x, "w": w, "b": b})


def _softmax(rng):
    from . import kernels as K

    rows, n = rng.integers(1, 5), rng.integers(2, 7)
    x = rng.normal(size=(rows, n))
    mask = rng.random((rows, n)) < 0.7
    mask[:, 0] = True
    r = rng.normal(size=(rows, n))
    y = K.softmax_masked(x, mask)
    return _compare(lambda: float(np.sum(K.softmax_masked(x, mask) * r)), {"x": K.softmax_backward(r, y)}, {"x": x})


def _layernorm(rng):
    from . import kernels as K

    rows, d = rng.integers(1, 5), rng.integers(2, 8)
    x, g, b = rng.normal(size=(rows, d)), rng.normal(size=d), rng.normal(size=d)
    r = rng.normal(size=(rows, d))
    _, ctx = K.layernorm(x, g, b)
    dx, dg, db = K.layernorm_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.layernorm(x, g, b)[0] * r)), {"x": dx, "g": dg, "b": db},
                    {"x": x, "g": g, "b": b})


def _gelu(rng):
    from . import kernels as K

    x = rng.normal(scale=2, size=(3, 5))
    r = rng.normal(size=x.shape)
    _, ctx = K.gelu(x)
    return _compare(lambda: float(np.sum(K.gelu(x)[0] * r)), {"x": K.gelu_backward(r, ctx)}, {"x": x})


def _conv1d(rng):
    from . import kernels as K

    stride = int(rng.integers(1, 4))
    k = int(rng.integers(stride, stride + 3))
    c_in, c_out = rng.integers(1, 4, 2)
    length = int(rng.integers(k, k + 12))
    x, w, b = rng.normal(size=(length, c_in)), rng.normal(size=(k, c_in, c_out)), rng.normal(size=c_out)
    out, ctx = K.conv1d(x, w, b, stride, k - stride)
    r = rng.normal(size=out.shape)
    dx, dw, db = K.conv1d_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.conv1d(x, w, b, stride, k - stride)[0] * r)),
                    {"x": dx, "w": dw, "b": db}, {"x": x, "w": w, "b": b})


def _depthwise(rng):
    from . import kernels as K

    k, c, t = int(rng.integers(1, 6)), int(rng.integers(1, 4)), int(rng.integers(1, 10))
    x, w, b = rng.normal(size=(t, c)), rng.normal(size=(k, c)), rng.normal(size=c)
    r = rng.normal(size=(t, c))
    _, ctx = K.depthwise_conv1d(x, w, b)
    dx, dw, db = K.depthwise_conv1d_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.depthwise_conv1d(x, w, b)[0] * r)),
                    {"x": dx, "w": dw, "b": db}, {"x": x, "w": w, "b": b})


def _attention(rng, banded: bool):
    from . import kernels as K
    from .encoder import WindowConfig, build_mask

    heads = int(rng.integers(1, 3))
    d = heads * int(rng.integers(1, 4))
    t = int(rng.integers(4, 9))
    left, right = int(rng.integers(0, 3)), int(rng.integers(0, 3))
    q, k, v = (rng.normal(size=(t, d)) for _ in range(3))
    plan = {"band": (left, right)} if banded else {"mask": build_mask(t, WindowConfig(left, 1, right))}
    r = rng.normal(size=q.shape)
    _, ctx = K.attention(q, k, v, heads, **plan)
    dq, dk, dv = K.attention_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.attention(q, k, v, heads, **plan)[0] * r)),
                    {"q": dq, "k": dk, "v": dv}, {"q": q, "k": k, "v": v})


def _cross_entropy(rng):
    from . import kernels as K

    n, v = int(rng.integers(1, 6)), int(rng.integers(2, 6))
    logits = rng.normal(size=(n, v))
    tgt = rng.integers(0, v, n)
    _, ctx = K.cross_entropy(logits, tgt)
    return _compare(lambda: K.cross_entropy(logits, tgt)[0], {"logits": K.cross_entropy_backward(1.0, ctx)},
                    {"logits": logits})


def _weighted_sum(rng):
    from . import kernels as K

    layers, t, f = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stack, logits = rng.normal(size=(layers, t, f)), rng.normal(size=layers)
    r = rng.normal(size=(t, f))
    _, ctx = K.weighted_sum(stack, logits)
    ds, dl = K.weighted_sum_backward(r, ctx)
    return _compare(lambda: float(np.sum(K.weighted_sum(stack, logits)[0] * r)), {"stack": ds, "logits": dl},
                    {"stack": stack, "logits": logits})


KERNEL_CHECKS = {
    "linear": _linear,
    "softmax_masked": _softmax,
    "layernorm": _layernorm,
    "gelu": _gelu,
    "conv1d": _conv1d,
    "depthwise_conv1d": _depthwise,
    "attention_dense": lambda rng: _attention(rng, False),
    "attention_banded": lambda rng: _attention(rng, True),
    "cross_entropy": _cross_entropy,
    "weighted_sum": _weighted_sum,
}


def check_kernel(name: str, seed: int) -> dict[str, float]:
    return KERNEL_CHECKS[name](np.random.default_rng(seed))


def check_student_loss(seed: int, zero_floor: float = 1e-8) -> dict[str, float]:
    """Per-parameter relative error of the full student cross-entropy gradient.

    A tiny 2-layer encoder is used; WF alternates with the seed and the window
    cycles through (1,1,1), full and (0,1,2). Parameters whose numerical
    gradient is below ``zero_floor`` everywhere (the key bias, by softmax shift
    invariance) report the analytic gradient's max magnitude instead.
    """
    from . import kernels as K
    from .encoder import Encoder, EncoderConfig, WindowConfig
    from .predictor import Student

    rng = np.random.default_rng(seed)
    wf = bool(seed % 2)
    window = [WindowConfig(1, 1, 1), WindowConfig.full(), WindowConfig(0, 1, 2)][seed % 3]
    cfg = EncoderConfig(n_layers=2, window=window, wf_enabled=wf, seed=seed, d_model=8, n_heads=2, d_ffn=16,
                        conv_spec=((4, 4, 2), (4, 2, 2)), pos_conv_kernel=3)
    enc = Encoder.create(cfg, dtype=np.float64)
    if wf:
        enc.params["wf.logits"].value[:] = rng.normal(size=3)
    student = Student(enc, rng.normal(0, 0.5, (5, 8)), rng.normal(0, 0.1, 5))
    x = rng.normal(0, 0.5, 36)
    targets = rng.integers(0, 5, 9)

    def loss():
        h0, _ = enc.frontend(x)
        return K.cross_entropy(student.head_forward(enc.stack(h0)[1])[0], targets)[0]

    enc.zero_grad()
    for p in student.head.values():
        p.zero_grad()
    h0, cf = enc.frontend(x, keep=True)
    _, final, cs = enc.stack(h0, keep=True)
    logits, hx = student.head_forward(final)
    _, cce = K.cross_entropy(logits, targets)
    dfinal = student.head_backward(K.cross_entropy_backward(1.0, cce), hx)
    enc.frontend_backward(enc.stack_backward(dfinal, cs), cf)
    errors = {}
    for name, p in {**enc.params, **student.head}.items():
        num = numerical_grad(loss, p.value)
        if np.abs(num).max() < zero_floor:
            errors[name] = float(np.abs(p.grad).max())
        else:
            errors[name] = relative_error(p.grad, num)
    return errors
