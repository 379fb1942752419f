"""Convolutional frontend + Transformer encoder with time-restricted attention.

Layout is time-major throughout: audio is (t,), features are (T, F).
The frontend is causal (left padding only) so ``T == t // frame_stride``.
Transformer blocks are pre-norm; every block applies the same
``(left, center=1, right)`` attention window.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels as K
from .checkpoint import load_checkpoint, save_checkpoint
from .tensor import Param

UNBOUNDED = math.inf


def _check_extent(value, name):
    if value == UNBOUNDED:
        return value
    if isinstance(value, (bool, np.bool_)) or int(value) != value or value < 0:
        raise ValueError(f"{name} must be a non-negative integer or UNBOUNDED, got {value!r}")
    return int(value)


@dataclass(frozen=True)
class WindowConfig:
    """Attention window: ``left`` past frames, ``center`` (always 1), ``right`` future frames."""

    left: float = UNBOUNDED
    center: int = 1
    right: float = UNBOUNDED

    def __post_init__(self):
        if self.center != 1:
            raise ValueError("center must be 1")
        object.__setattr__(self, "left", _check_extent(self.left, "left"))
        object.__setattr__(self, "right", _check_extent(self.right, "right"))

    @property
    def bounded(self) -> bool:
        return self.left != UNBOUNDED and self.right != UNBOUNDED

    @property
    def is_full(self) -> bool:
        return self.left == UNBOUNDED and self.right == UNBOUNDED

    @classmethod
    def full(cls) -> "WindowConfig":
        return cls(UNBOUNDED, 1, UNBOUNDED)

    @classmethod
    def symmetric(cls, k: int) -> "WindowConfig":
        return cls(k, 1, k)

    @classmethod
    def parse(cls, text: str) -> "WindowConfig":
        """Parse ``"8,1,8"``, ``"8,8"``, ``"inf,1,4"`` or ``"full"``."""
        text = text.strip().lower()
        if text in ("full", "baseline"):
            return cls.full()
        parts = [p.strip() for p in text.split(",")]
        conv = lambda p: UNBOUNDED if p in ("inf", "unbounded", "∞") else int(p)
        if len(parts) == 2:
            return cls(conv(parts[0]), 1, conv(parts[1]))
        if len(parts) == 3:
            return cls(conv(parts[0]), int(parts[1]), conv(parts[2]))
        raise ValueError(f"cannot parse window {text!r}")

    def __str__(self):
        fmt = lambda v: "inf" if v == UNBOUNDED else str(v)
        return f"{fmt(self.left)},{self.center},{fmt(self.right)}"


@dataclass(frozen=True)
class EncoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    conv_spec: tuple = ((64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2), (64, 2, 2), (64, 2, 2))
    window: WindowConfig = field(default_factory=WindowConfig.full)
    wf_enabled: bool = False
    seed: int = 0
    pos_conv_kernel: int = 5
    pos_conv_groups: int = 0  # 0 means depthwise (groups == d_model)
    sample_rate: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "conv_spec", tuple(tuple(int(v) for v in layer) for layer in self.conv_spec))
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.conv_spec:
            raise ValueError("conv_spec must not be empty")
        for ch, k, s in self.conv_spec:
            if ch < 1 or s < 1 or k < s:
                raise ValueError(f"bad conv layer {(ch, k, s)}: need channels>=1 and kernel>=stride>=1")

    @property
    def frame_stride_samples(self) -> int:
        return math.prod(s for _, _, s in self.conv_spec)

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate / self.frame_stride_samples

    @property
    def groups(self) -> int:
        return self.pos_conv_groups or self.d_model

    def n_frames(self, n_samples: int) -> int:
        return n_samples // self.frame_stride_samples

    def to_manifest(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "d_ffn": self.d_ffn,
            "conv_spec": ",".join(":".join(map(str, c)) for c in self.conv_spec),
            "window": str(self.window),
            "wf_enabled": int(self.wf_enabled),
            "seed": self.seed,
            "pos_conv_kernel": self.pos_conv_kernel,
            "pos_conv_groups": self.pos_conv_groups,
            "sample_rate": self.sample_rate,
        }

    @classmethod
    def from_manifest(cls, m: dict) -> "EncoderConfig":
        conv = tuple(tuple(int(v) for v in c.split(":")) for c in m["conv_spec"].split(","))
        return cls(
            n_layers=int(m["n_layers"]), d_model=int(m["d_model"]), n_heads=int(m["n_heads"]),
            d_ffn=int(m["d_ffn"]), conv_spec=conv, window=WindowConfig.parse(m["window"]),
            wf_enabled=bool(int(m["wf_enabled"])), seed=int(m["seed"]),
            pos_conv_kernel=int(m["pos_conv_kernel"]), pos_conv_groups=int(m["pos_conv_groups"]),
            sample_rate=int(m["sample_rate"]),
        )


def desk_config(**overrides) -> EncoderConfig:
    return replace(EncoderConfig(), **overrides)


WAVLM_CONV_SPEC = ((512, 10, 5),) + ((512, 3, 2),) * 4 + ((512, 2, 2),) * 2


def paper_config(**overrides) -> EncoderConfig:
    """WavLM-large-sized profile. Only used for cost modelling."""
    base = EncoderConfig(
        n_layers=21, d_model=1024, n_heads=16, d_ffn=4096, conv_spec=WAVLM_CONV_SPEC,
        pos_conv_kernel=128, pos_conv_groups=16,
    )
    return replace(base, **overrides)


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, F)
    frame_rate_hz: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# -- window arithmetic ---------------------------------------------------------

def build_mask(n_frames: int, window: WindowConfig) -> np.ndarray:
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    i = np.arange(n_frames)[:, None]
    j = np.arange(n_frames)[None, :]
    return (j >= i - window.left) & (j <= i + window.right)


def receptive_field(window: WindowConfig, n_layers: int) -> float:
    """Frames that can influence one output frame: (left+right)·n + center."""
    if not window.bounded:
        return UNBOUNDED
    return (window.left + window.right) * n_layers + window.center


def theoretical_latency(window: WindowConfig, n_layers: int) -> float:
    """Future frames needed before an output frame is final: right·n + center."""
    if window.right == UNBOUNDED:
        return UNBOUNDED
    return window.right * n_layers + window.center


def attention_plan(n_frames: int, window: WindowConfig):
    """Choose the banded kernel when the window is narrower than the sequence."""
    if window.bounded:
        left = min(window.left, n_frames - 1)
        right = min(window.right, n_frames - 1)
        if left + right + 1 < n_frames:
            return {"band": (left, right)}
    return {"mask": build_mask(n_frames, window)}


# -- model -------------------------------------------------------------------

LAYER_PARAMS = ("attn_norm.gain", "attn_norm.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk",
                "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ffn_norm.gain", "ffn_norm.bias",
                "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2")


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
                similarity_gain: float | None = None) -> dict[str, Param]:
    """Random initialisation.

    ``similarity_gain`` ties key and query projections (scaled by the gain) so
    attention concentrates on frames with similar content; used for teachers.
    """
    if cfg.groups != cfg.d_model:
        raise ValueError("executable encoders use a depthwise positional conv")
    p: dict[str, np.ndarray] = {}
    c_in = 1
    for i, (ch, k, _) in enumerate(cfg.conv_spec):
        p[f"frontend.conv{i}.weight"] = rng.normal(0, math.sqrt(2.0 / (k * c_in)), (k, c_in, ch))
        p[f"frontend.conv{i}.bias"] = np.zeros(ch)
        c_in = ch
    d = cfg.d_model
    p["frontend.norm.gain"] = np.ones(c_in)
    p["frontend.norm.bias"] = np.zeros(c_in)
    p["frontend.proj.weight"] = rng.normal(0, 1 / math.sqrt(c_in), (c_in, d))
    p["frontend.proj.bias"] = np.zeros(d)
    p["frontend.posconv.weight"] = rng.normal(0, 1 / math.sqrt(cfg.pos_conv_kernel), (cfg.pos_conv_kernel, d))
    p["frontend.posconv.bias"] = np.zeros(d)
    for n in range(cfg.n_layers):
        pre = f"layers.{n}."
        for norm in ("attn_norm", "ffn_norm"):
            p[pre + norm + ".gain"] = np.ones(d)
            p[pre + norm + ".bias"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + w] = rng.normal(0, 1 / math.sqrt(d), (d, d))
            p[pre + "attn.b" + w[1]] = np.zeros(d)
        if similarity_gain is not None:
            p[pre + "attn.wq"] *= math.sqrt(similarity_gain)
            p[pre + "attn.wk"] = p[pre + "attn.wq"].copy()
        p[pre + "ffn.w1"] = rng.normal(0, 1 / math.sqrt(d), (d, cfg.d_ffn))
        p[pre + "ffn.b1"] = np.zeros(cfg.d_ffn)
        p[pre + "ffn.w2"] = rng.normal(0, 1 / math.sqrt(cfg.d_ffn), (cfg.d_ffn, d))
        p[pre + "ffn.b2"] = np.zeros(d)
    if cfg.wf_enabled:
        p["wf.logits"] = np.zeros(cfg.n_layers + 1)
    return {k: Param(np.asarray(v, dtype=dtype)) for k, v in p.items()}


@dataclass
class EncoderOutput:
    layers: list[FeatureMatrix]  # index 0 = frontend features, k = block k output
    final: FeatureMatrix


class Encoder:
    """Weights plus the forward and hand-wired backward passes."""

    def __init__(self, cfg: EncoderConfig, params: dict[str, Param]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: EncoderConfig, dtype=np.float32, similarity_gain: float | None = None) -> "Encoder":
        rng = np.random.default_rng(cfg.seed)
        return cls(cfg, init_params(cfg, rng, dtype, similarity_gain))

    @property
    def dtype(self):
        return self.params["frontend.proj.weight"].value.dtype

    def v(self, name: str) -> np.ndarray:
        return self.params[name].value

    def astype(self, dtype) -> "Encoder":
        return Encoder(self.cfg, {k: p.astype(dtype) for k, p in self.params.items()})

    def truncated(self, n_layers: int, window: WindowConfig | None = None,
                  wf_enabled: bool | None = None, seed: int | None = None) -> "Encoder":
        """Copy of the first ``n_layers`` blocks (student initialisation)."""
        if n_layers > self.cfg.n_layers:
            raise ValueError("cannot grow an encoder by truncation")
        cfg = replace(self.cfg, n_layers=n_layers,
                      window=self.cfg.window if window is None else window,
                      wf_enabled=self.cfg.wf_enabled if wf_enabled is None else wf_enabled,
                      seed=self.cfg.seed if seed is None else seed)
        keep = {}
        for name, p in self.params.items():
            if name.startswith("layers."):
                if int(name.split(".")[1]) >= n_layers:
                    continue
            elif name.startswith("wf."):
                continue
            keep[name] = p.astype(p.value.dtype)
        if cfg.wf_enabled:
            keep["wf.logits"] = Param(np.zeros(n_layers + 1, dtype=self.dtype))
        return Encoder(cfg, keep)

    # frontend ---------------------------------------------------------------

    def n_frames(self, n_samples: int) -> int:
        return self.cfg.n_frames(n_samples)

    def frontend(self, x: np.ndarray, keep: bool = False):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 1 or x.size == 0:
            raise ValueError("audio must be a non-empty 1-D array")
        if self.n_frames(x.size) < 1:
            raise ValueError(
                f"audio of {x.size} samples is shorter than one frame ({self.cfg.frame_stride_samples} samples)")
        h = x[:, None]
        ctxs = []
        for i, (_, k, s) in enumerate(self.cfg.conv_spec):
            h, c1 = K.conv1d(h, self.v(f"frontend.conv{i}.weight"), self.v(f"frontend.conv{i}.bias"),
                             s, pad_left=k - s, tag="frontend.conv")
            h, c2 = K.gelu(h)
            ctxs.append((c1, c2))
        h, cn = K.layernorm(h, self.v("frontend.norm.gain"), self.v("frontend.norm.bias"))
        proj, cp = K.linear(h, self.v("frontend.proj.weight"), self.v("frontend.proj.bias"), tag="frontend.proj")
        pc, cpc = K.depthwise_conv1d(proj, self.v("frontend.posconv.weight"), self.v("frontend.posconv.bias"),
                                     tag="frontend.posconv")
        g, cg = K.gelu(pc)
        out = proj + g
        return out, ((ctxs, cn, cp, cpc, cg) if keep else None)

    def frontend_backward(self, dout, ctx) -> None:
        K._need(ctx, "frontend")
        ctxs, cn, cp, cpc, cg = ctx
        acc = self._acc
        dpc = K.gelu_backward(dout, cg)
        dproj_pc, dw, db = K.depthwise_conv1d_backward(dpc, cpc)
        acc("frontend.posconv.weight", dw)
        acc("frontend.posconv.bias", db)
        dproj = dout + dproj_pc
        dh, dw, db = K.linear_backward(dproj, cp)
        acc("frontend.proj.weight", dw)
        acc("frontend.proj.bias", db)
        dh, dg, db = K.layernorm_backward(dh, cn)
        acc("frontend.norm.gain", dg)
        acc("frontend.norm.bias", db)
        for i in reversed(range(len(self.cfg.conv_spec))):
            c1, c2 = ctxs[i]
            dh = K.gelu_backward(dh, c2)
            dh, dw, db = K.conv1d_backward(dh, c1)
            acc(f"frontend.conv{i}.weight", dw)
            acc(f"frontend.conv{i}.bias", db)

    def _acc(self, name, g):
        self.params[name].grad += g

    # transformer blocks -------------------------------------------------------

    def block(self, n: int, x: np.ndarray, plan: dict, keep: bool = False):
        pre = f"layers.{n}."
        v = lambda s: self.v(pre + s)
        a, c_n1 = K.layernorm(x, v("attn_norm.gain"), v("attn_norm.bias"))
        q, cq = K.linear(a, v("attn.wq"), v("attn.bq"), tag="layer.proj")
        k, ck = K.linear(a, v("attn.wk"), v("attn.bk"), tag="layer.proj")
        val, cv = K.linear(a, v("attn.wv"), v("attn.bv"), tag="layer.proj")
        ctx, c_att = K.attention(q, k, val, self.cfg.n_heads, tag="layer.attention", **plan)
        o, co = K.linear(ctx, v("attn.wo"), v("attn.bo"), tag="layer.proj")
        x1 = x + o
        b, c_n2 = K.layernorm(x1, v("ffn_norm.gain"), v("ffn_norm.bias"))
        u, c1 = K.linear(b, v("ffn.w1"), v("ffn.b1"), tag="layer.ffn")
        g, cg = K.gelu(u)
        f, c2 = K.linear(g, v("ffn.w2"), v("ffn.b2"), tag="layer.ffn")
        y = x1 + f
        return y, ((c_n1, cq, ck, cv, c_att, co, c_n2, c1, cg, c2) if keep else None)

    def block_backward(self, n: int, dy: np.ndarray, ctx) -> np.ndarray:
        K._need(ctx, f"block {n}")
        c_n1, cq, ck, cv, c_att, co, c_n2, c1, cg, c2 = ctx
        pre = f"layers.{n}."
        acc = lambda s, g: self._acc(pre + s, g)
        dg, dw, db = K.linear_backward(dy, c2)
        acc("ffn.w2", dw), acc("ffn.b2", db)
        du = K.gelu_backward(dg, cg)
        dbn, dw, db = K.linear_backward(du, c1)
        acc("ffn.w1", dw), acc("ffn.b1", db)
        dx1, dgain, dbias = K.layernorm_backward(dbn, c_n2)
        acc("ffn_norm.gain", dgain), acc("ffn_norm.bias", dbias)
        dx1 = dx1 + dy
        dctx, dw, db = K.linear_backward(dx1, co)
        acc("attn.wo", dw), acc("attn.bo", db)
        dq, dk, dv = K.attention_backward(dctx, c_att)
        da = np.zeros_like(dq)
        for grad, c, w, b in ((dq, cq, "wq", "bq"), (dk, ck, "wk", "bk"), (dv, cv, "wv", "bv")):
            d_in, dw, db = K.linear_backward(grad, c)
            acc("attn." + w, dw), acc("attn." + b, db)
            da += d_in
        dx, dgain, dbias = K.layernorm_backward(da, c_n1)
        acc("attn_norm.gain", dgain), acc("attn_norm.bias", dbias)
        return dx + dx1

    def stack(self, h0: np.ndarray, keep: bool = False, masked: bool = True):
        """Run all blocks on frontend features. Returns (hidden list, final, ctx)."""
        t = h0.shape[0]
        plan = attention_plan(t, self.cfg.window) if masked else {"mask": None}
        hidden = [h0]
        ctxs = []
        h = h0
        for n in range(self.cfg.n_layers):
            h, c = self.block(n, h, plan, keep)
            hidden.append(h)
            ctxs.append(c)
        if self.cfg.wf_enabled:
            final, cwf = K.weighted_sum(np.stack(hidden), self.v("wf.logits"))
        else:
            final, cwf = hidden[-1], None
        return hidden, final, ((ctxs, cwf) if keep else None)

    def stack_backward(self, dfinal: np.ndarray, ctx) -> np.ndarray:
        K._need(ctx, "encoder stack")
        ctxs, cwf = ctx
        n = self.cfg.n_layers
        if self.cfg.wf_enabled:
            dstack, dlogits = K.weighted_sum_backward(dfinal, cwf)
            self._acc("wf.logits", dlogits)
            dh = dstack[n].copy()
        else:
            dstack = None
            dh = dfinal
        for k in reversed(range(n)):
            dh = self.block_backward(k, dh, ctxs[k])
            if dstack is not None:
                dh = dh + dstack[k]
        return dh

    def encode(self, x: np.ndarray, masked: bool = True) -> EncoderOutput:
        h0, _ = self.frontend(x)
        hidden, final, _ = self.stack(h0, masked=masked)
        rate = self.cfg.frame_rate_hz
        return EncoderOutput([FeatureMatrix(h, rate) for h in hidden], FeatureMatrix(final, rate))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # persistence ------------------------------------------------------------

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        manifest = {"kind": "encoder", **self.cfg.to_manifest(), "dtype": str(self.dtype)}
        manifest.update(extra or {})
        save_checkpoint(directory, manifest, {k: p.value for k, p in self.params.items()})

    @classmethod
    def load(cls, directory: str | Path) -> "Encoder":
        manifest, tensors = load_checkpoint(directory)
        cfg = EncoderConfig.from_manifest(manifest)
        names = [k for k in tensors if not k.startswith("head.")]
        return cls(cfg, {k: Param(tensors[k]) for k in names})


def weighted_features(layers: list[FeatureMatrix], logits: np.ndarray) -> FeatureMatrix:
    """Softmax-weighted sum of per-layer features."""
    if len(layers) != len(logits):
        raise ValueError(f"{len(layers)} layers but {len(logits)} weights")
    shapes = {fm.frames.shape for fm in layers}
    if len(shapes) != 1:
        raise ValueError(f"layer shapes differ: {sorted(shapes)}")
    out, _ = K.weighted_sum(np.stack([fm.frames for fm in layers]), np.asarray(logits, dtype=float))
    return FeatureMatrix(out, layers[0].frame_rate_hz)
