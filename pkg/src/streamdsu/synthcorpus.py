"""Phone-like synthetic speech with frame-level latent labels.

Each phone id has a fixed recipe: two or three sinusoids at phone-specific
frequencies plus low-passed noise at a phone-specific level. Utterances
are random phone scripts with geometric segment durations. Everything is
driven by the xoshiro256** bank in ``rng`` so output is identical across
platforms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import lfilter

from .rng import Xoshiro256, derive_seed
from .wavio import SAMPLE_RATE, quantize, write_wav

FRAME_STRIDE = 160
MIN_DUR = 5
MEAN_EXTRA_DUR = 7.0  # mean frames above MIN_DUR
TARGET_RMS = 0.1
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class PhoneRecipe:
    freqs: tuple[float, ...]
    amps: tuple[float, ...]
    noise_level: float
    noise_pole: float


def phone_recipe(phone: int) -> PhoneRecipe:
    # golden-ratio stepping spreads dominant frequencies evenly for any P
    base = 180.0 + 2200.0 * ((phone + 1) * GOLDEN % 1.0)
    n_comp = 2 + phone % 2
    ratios = (1.0, 1.0 + 0.5 + 0.9 * ((phone + 1) * math.sqrt(2.0) % 1.0), 3.1 + 0.4 * (phone % 3))
    freqs = tuple(min(base * r, 7000.0) for r in ratios[:n_comp])
    amps = tuple(1.0 / (k + 1) for k in range(n_comp))
    noise = 0.05 + 0.45 * ((phone + 1) * math.sqrt(3.0) % 1.0)
    pole = 0.3 + 0.6 * ((phone + 1) * math.sqrt(5.0) % 1.0)
    return PhoneRecipe(freqs, amps, noise, pole)


@dataclass
class LatentScript:
    segments: list[tuple[int, int]]  # (phone_id, duration in frames)
    n_phones: int
    seed: int

    @property
    def n_frames(self) -> int:
        return sum(d for _, d in self.segments)

    def frame_labels(self) -> np.ndarray:
        return np.repeat([p for p, _ in self.segments], [d for _, d in self.segments]).astype(np.int64)


@dataclass
class Utterance:
    id: str
    samples: np.ndarray
    script: LatentScript


def _frame_bounds(length_bounds: tuple[float, float]) -> tuple[int, int]:
    lo_s, hi_s = length_bounds
    lo, hi = int(round(lo_s * SAMPLE_RATE / FRAME_STRIDE)), int(round(hi_s * SAMPLE_RATE / FRAME_STRIDE))
    if not (MIN_DUR <= lo <= hi):
        raise ValueError(f"degenerate length bounds {length_bounds} (need {MIN_DUR} frames <= lo <= hi)")
    return lo, hi


def sample_script(n_phones: int, length_bounds: tuple[float, float], seed: int) -> LatentScript:
    if n_phones < 2:
        raise ValueError("need at least 2 phones")
    lo, hi = _frame_bounds(length_bounds)
    gen = Xoshiro256(seed)
    total = int(gen.integers(lo, hi + 1, 1)[0])
    segments: list[list[int]] = []
    used = 0
    prev = -1
    while used < total:
        if prev < 0:
            phone = int(gen.integers(0, n_phones, 1)[0])
        else:
            # never repeat the previous phone
            phone = int(gen.integers(0, n_phones - 1, 1)[0])
            phone += phone >= prev
        dur = MIN_DUR + int(gen.geometric(1.0 / (1.0 + MEAN_EXTRA_DUR), 1)[0])
        dur = min(dur, total - used)
        if dur < MIN_DUR:
            if segments:
                segments[-1][1] += dur
            else:
                segments.append([phone, dur])
        else:
            segments.append([phone, dur])
            prev = phone
        used += dur
    return LatentScript([(p, d) for p, d in segments], n_phones, seed)


def render(script: LatentScript, seed: int) -> np.ndarray:
    gen = Xoshiro256(derive_seed(seed, "render"))
    out = np.empty(script.n_frames * FRAME_STRIDE)
    pos = 0
    for phone, dur in script.segments:
        rec = phone_recipe(phone)
        n = dur * FRAME_STRIDE
        t = np.arange(n) / SAMPLE_RATE
        phases = gen.uniform(0.0, 2.0 * np.pi, len(rec.freqs))
        seg = np.zeros(n)
        for f, a, ph in zip(rec.freqs, rec.amps, phases):
            seg += a * np.sin(2.0 * np.pi * f * t + ph)
        seg += rec.noise_level * lfilter([1.0 - rec.noise_pole], [1.0, -rec.noise_pole], gen.normal(n))
        out[pos:pos + n] = seg
        pos += n
    rms = math.sqrt(float(np.mean(out * out)))
    return quantize(out * (TARGET_RMS / rms))


def gen_utterance(n_phones: int, length_bounds: tuple[float, float] = (2.0, 6.0), seed: int = 0,
                  utt_id: str = "utt") -> Utterance:
    script = sample_script(n_phones, length_bounds, seed)
    return Utterance(utt_id, render(script, seed), script)


@dataclass
class CorpusEntry:
    id: str
    path: Path
    n_frames: int


def gen_corpus(n_utts: int, n_phones: int, seed: int, out_dir: str | Path,
               length_bounds: tuple[float, float] = (2.0, 6.0), prefix: str = "utt") -> list[CorpusEntry]:
    """Write ``wav/<id>.wav``, ``manifest`` and ``labels`` under ``out_dir``."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    entries, label_lines = [], []
    for i in range(n_utts):
        uid = f"{prefix}-{i:05d}"
        utt = gen_utterance(n_phones, length_bounds, derive_seed(seed, uid), uid)
        rel = Path("wav") / f"{uid}.wav"
        write_wav(out_dir / rel, utt.samples)
        entries.append(CorpusEntry(uid, out_dir / rel, utt.script.n_frames))
        label_lines.append(" ".join(map(str, utt.script.frame_labels())))
    (out_dir / "manifest").write_text("".join(f"{e.id} {e.path.relative_to(out_dir)} {e.n_frames}\n" for e in entries))
    (out_dir / "labels").write_text("\n".join(label_lines) + "\n")
    return entries


def read_manifest(corpus_dir: str | Path) -> list[CorpusEntry]:
    corpus_dir = Path(corpus_dir)
    entries = []
    for line in (corpus_dir / "manifest").read_text().splitlines():
        if line.strip():
            uid, rel, n = line.split()
            entries.append(CorpusEntry(uid, corpus_dir / rel, int(n)))
    return entries


def read_labels(corpus_dir: str | Path) -> list[np.ndarray]:
    text = (Path(corpus_dir) / "labels").read_text()
    return [np.array(line.split(), dtype=np.int64) for line in text.splitlines() if line.strip()]


# -- clustering quality ---------------------------------------------------------

def _flatten_aligned(dsus, labels) -> tuple[np.ndarray, np.ndarray]:
    dsus = [np.asarray(getattr(d, "units", d)).ravel() for d in dsus]
    labels = [np.asarray(x).ravel() for x in labels]
    if len(dsus) != len(labels):
        raise ValueError(f"{len(dsus)} unit sequences vs {len(labels)} label sequences")
    for k, (d, x) in enumerate(zip(dsus, labels)):
        if d.size != x.size:
            raise ValueError(f"sequence {k}: {d.size} units vs {x.size} labels")
    if not dsus:
        raise ValueError("empty corpus")
    return np.concatenate(dsus).astype(np.int64), np.concatenate(labels).astype(np.int64)


def contingency(dsus: np.ndarray, labels: np.ndarray) -> np.ndarray:
    _, d = np.unique(dsus, return_inverse=True)
    _, x = np.unique(labels, return_inverse=True)
    table = np.zeros((d.max() + 1, x.max() + 1), dtype=np.int64)
    np.add.at(table, (d, x), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def cluster_quality(dsus: Sequence, labels: Sequence) -> tuple[float, float]:
    """(purity, NMI) of unit ids against latent phone labels.

    NMI uses the geometric-mean normalisation. When both sides are constant
    the clustering is trivially perfect (NMI 1); when only one is, NMI is 0.
    """
    d, x = _flatten_aligned(dsus, labels)
    if d.size == 0:
        raise ValueError("no frames")
    table = contingency(d, x)
    n = table.sum()
    purity = table.max(axis=1).sum() / n
    h_d, h_x = _entropy(table.sum(1)), _entropy(table.sum(0))
    if h_d == 0.0 and h_x == 0.0:
        return float(purity), 1.0
    if h_d == 0.0 or h_x == 0.0:
        return float(purity), 0.0
    pxy = table / n
    outer = np.outer(table.sum(1), table.sum(0)) / n**2
    nz = pxy > 0
    mi = float((pxy[nz] * np.log(pxy[nz] / outer[nz])).sum())
    return float(purity), float(min(1.0, max(0.0, mi / math.sqrt(h_d * h_x))))
