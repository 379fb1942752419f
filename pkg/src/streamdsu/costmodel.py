"""Analytical FLOPs accounting and Pareto-front extraction.

Counting convention: a matmul of (m x k) by (k x n) costs 2·m·k·n.
Elementwise work (softmax, norms, activations, residual adds, biases) is
not counted.

FULL counts everything above, including the attention score and context
matmuls over allowed (query, key) pairs. COMPAT drops those two matmuls;
it reproduces the published per-layer figures, whose FLOP counter hooked
modules and so never saw the attention products.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, WindowConfig, paper_config, desk_config

PAPER_VOCAB = 2000
DESK_VOCAB = 32


class Convention(str, Enum):
    FULL = "FULL"
    COMPAT = "COMPAT"


@dataclass
class CostReport:
    components: dict[str, int]
    convention: Convention
    n_frames: int
    audio_seconds: float
    notes: str = "elementwise ops (softmax, norm, activation, bias, residual) excluded"

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def tflops_per_minute(self) -> float:
        if self.audio_seconds <= 0:
            return 0.0
        return self.total * (60.0 / self.audio_seconds) / 1e12

    def group(self, suffix: str) -> int:
        return sum(v for k, v in self.components.items() if k.endswith(suffix))

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("component,flops\n")
        for name, flops in self.components.items():
            buf.write(f"{name},{flops}\n")
        buf.write(f"total,{self.total}\n")
        return buf.getvalue()

    def summary(self) -> str:
        return f"tflops_per_minute={self.tflops_per_minute:.6f} convention={self.convention.value}"


def window_row_widths(n_frames: int, window: WindowConfig) -> np.ndarray:
    """Allowed key count per query row, with clamping at both sequence edges."""
    i = np.arange(n_frames, dtype=np.int64)
    lo = np.zeros_like(i) if window.left == float("inf") else np.maximum(0, i - int(window.left))
    hi = np.full_like(i, n_frames - 1) if window.right == float("inf") else np.minimum(n_frames - 1, i + int(window.right))
    return hi - lo + 1


def conv_frontend_flops(cfg: EncoderConfig, n_samples: int) -> int:
    flops = 0
    length, c_in = n_samples, 1
    for ch, k, s in cfg.conv_spec:
        length = length // s
        flops += 2 * length * ch * c_in * k
        c_in = ch
    return flops


def cost_encoder(cfg: EncoderConfig, n_frames: int | None = None, convention: Convention = Convention.FULL,
                 n_samples: int | None = None, audio_seconds: float | None = None) -> CostReport:
    """FLOPs of the encoder for ``n_frames`` frames (or an exact sample count)."""
    convention = Convention(convention)
    if n_samples is None:
        if n_frames is None:
            raise ValueError("give n_frames or n_samples")
        n_samples = n_frames * cfg.frame_stride_samples
    t = cfg.n_frames(n_samples)
    d, c_last = cfg.d_model, cfg.conv_spec[-1][0]
    comp: dict[str, int] = {}
    comp["frontend.conv"] = conv_frontend_flops(cfg, n_samples)
    comp["frontend.proj"] = 2 * t * c_last * d
    comp["frontend.posconv"] = 2 * t * d * (d // cfg.groups) * cfg.pos_conv_kernel
    attn = 4 * d * int(window_row_widths(t, cfg.window).sum()) if t else 0
    for n in range(cfg.n_layers):
        comp[f"layer{n}.proj"] = 8 * t * d * d
        comp[f"layer{n}.ffn"] = 4 * t * d * cfg.d_ffn
        comp[f"layer{n}.attention"] = attn if convention is Convention.FULL else 0
    seconds = n_samples / cfg.sample_rate if audio_seconds is None else audio_seconds
    return CostReport(comp, convention, t, seconds)


def s2u_report(cfg: EncoderConfig, audio_seconds: float, convention: Convention = Convention.FULL,
               vocab_size: int = DESK_VOCAB) -> CostReport:
    if audio_seconds <= 0:
        raise ValueError("audio_seconds must be positive")
    n_samples = int(round(audio_seconds * cfg.sample_rate))
    report = cost_encoder(cfg, convention=convention, n_samples=n_samples, audio_seconds=audio_seconds)
    report.components["head"] = 2 * report.n_frames * cfg.d_model * vocab_size
    return report


def cost_s2u(cfg: EncoderConfig, audio_seconds: float, convention: Convention = Convention.FULL,
             vocab_size: int = DESK_VOCAB) -> float:
    """TFLOPs per minute of audio for encoder + linear head."""
    return s2u_report(cfg, audio_seconds, convention, vocab_size).tflops_per_minute


def profile(name: str, **overrides) -> tuple[EncoderConfig, int]:
    """(encoder config, vocabulary size) for a named profile."""
    if name == "paper":
        return paper_config(**overrides), PAPER_VOCAB
    if name == "desk":
        return desk_config(**overrides), DESK_VOCAB
    raise ValueError(f"unknown profile {name!r} (expected 'paper' or 'desk')")


# -- Pareto front -----------------------------------------------------------------

@dataclass(frozen=True)
class ParetoPoint:
    cost: float
    metric: float
    label: object = field(default=None, compare=False)


def dominates(a, b) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def pareto_front(points: Sequence) -> list:
    """Non-dominated points (lower cost and lower metric are better), sorted by cost.

    Points are (cost, metric[, label]) tuples; exact duplicates are all kept.
    """
    if not points:
        raise ValueError("pareto_front of an empty set")
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    front = []
    best = float("inf")
    i = 0
    while i < len(order):
        cost = points[order[i]][0]
        group = []
        while i < len(order) and points[order[i]][0] == cost:
            group.append(order[i])
            i += 1
        lowest = points[group[0]][1]
        if lowest < best:
            front.extend(j for j in group if points[j][1] == lowest)
            best = lowest
    return [points[j] for j in front]
