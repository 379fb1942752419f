"""Student encoder + linear head distilled onto teacher unit labels."""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels as K
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import Encoder, EncoderConfig
from .postproc import dedup
from .quantizer import Codebook, DsuSequence, codebook_to_linear
from .tensor import Param

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    HEAD_ONLY = "head_only"
    ENCODER_AND_HEAD = "encoder_and_head"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-6
    lr_decay: float = 0.9
    decay_every: int = 1000
    max_epochs: int = 10
    patience: int = 1
    batch_frames: int = 20000
    seed: int = 0
    train_frontend: bool = False
    val_percent: int = 10
    wf_lr_scale: float = 1.0  # step-size multiplier for the layer-weight logits

    def __post_init__(self):
        if min(self.lr, self.lr_decay, self.decay_every, self.max_epochs, self.batch_frames, self.wf_lr_scale) <= 0:
            raise ValueError("lr, lr_decay, decay_every, max_epochs, batch_frames and wf_lr_scale must be positive")
        if self.weight_decay < 0 or self.patience < 1:
            raise ValueError("weight_decay must be >= 0 and patience >= 1")
        if not 0 < self.val_percent < 100:
            raise ValueError("val_percent must be in (0, 100)")

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.decay_every)


# -- model -----------------------------------------------------------------------

class Student:
    """Encoder features -> float64 linear head -> unit logits."""

    def __init__(self, encoder: Encoder, head_w: np.ndarray, head_b: np.ndarray):
        head_w = np.asarray(head_w, dtype=np.float64)
        head_b = np.asarray(head_b, dtype=np.float64)
        if head_w.ndim != 2 or head_w.shape[1] != encoder.cfg.d_model or head_b.shape != (head_w.shape[0],):
            raise ValueError(f"head {head_w.shape}/{head_b.shape} does not fit feature dim {encoder.cfg.d_model}")
        self.encoder = encoder
        self.head = {"head.weight": Param(head_w), "head.bias": Param(head_b)}

    @classmethod
    def create(cls, encoder: Encoder, codebook: Codebook | None = None, vocab_size: int | None = None,
               warm_start: bool = True, seed: int = 0) -> "Student":
        if warm_start:
            if codebook is None:
                raise ValueError("warm start needs a codebook")
            w, b = codebook_to_linear(codebook)
            return cls(encoder, w, b)
        v = vocab_size if vocab_size is not None else codebook.vocab_size
        d = encoder.cfg.d_model
        rng = np.random.default_rng(seed)
        return cls(encoder, rng.normal(0.0, 1.0 / np.sqrt(d), (v, d)), np.zeros(v))

    @property
    def vocab_size(self) -> int:
        return self.head["head.weight"].value.shape[0]

    @property
    def cfg(self) -> EncoderConfig:
        return self.encoder.cfg

    def astype(self, dtype) -> "Student":
        return Student(self.encoder.astype(dtype), self.head["head.weight"].value, self.head["head.bias"].value)

    def head_forward(self, feats: np.ndarray):
        x = np.asarray(feats, dtype=np.float64)
        w = self.head["head.weight"].value
        logits = K.matmul(x, w.T, tag="head") + self.head["head.bias"].value
        return logits, x

    def head_backward(self, dlogits: np.ndarray, x: np.ndarray) -> np.ndarray:
        w = self.head["head.weight"]
        w.grad += dlogits.T @ x
        self.head["head.bias"].grad += dlogits.sum(axis=0)
        return dlogits @ w.value

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        enc = self.encoder
        manifest = {"kind": "student", **enc.cfg.to_manifest(), "dtype": str(enc.dtype),
                    "vocab_size": self.vocab_size, **(extra or {})}
        tensors = {k: p.value for k, p in enc.params.items()}
        tensors.update({k: p.value for k, p in self.head.items()})
        save_checkpoint(directory, manifest, tensors)

    @classmethod
    def load(cls, directory: str | Path) -> "Student":
        manifest, tensors = load_checkpoint(directory)
        if "head.weight" not in tensors:
            raise ValueError(f"{directory}: checkpoint has no head tensors")
        enc = Encoder.load(directory)
        return cls(enc, tensors["head.weight"], tensors["head.bias"])


def predict_logits(student: Student, x: np.ndarray) -> np.ndarray:
    """Per-frame logits (T, V) for raw audio."""
    return student.head_forward(student.encoder.encode(x).final.frames)[0]


def predict_units(student: Student, x: np.ndarray) -> DsuSequence:
    # np.argmax returns the first maximum, i.e. ties go to the lowest id
    return DsuSequence(np.argmax(predict_logits(student, x), axis=1), student.cfg.frame_rate_hz)


# -- metrics ---------------------------------------------------------------------

def _units(seq) -> np.ndarray:
    return np.asarray(getattr(seq, "units", seq), dtype=np.int64).reshape(-1)


def frame_accuracy(pred, gold) -> float:
    p, g = _units(pred), _units(gold)
    if p.size != g.size:
        raise ValueError(f"length mismatch: {p.size} predicted vs {g.size} gold frames")
    if g.size == 0:
        raise ValueError("empty sequences")
    return float(np.mean(p == g))


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    """Edit distance with unit costs; one numpy row per element of ``a``."""
    b = np.asarray(b, dtype=np.int64)
    prev = np.arange(b.size + 1)
    for i, x in enumerate(a, start=1):
        sub = prev[:-1] + (b != x)
        cur = np.empty_like(prev)
        cur[0] = i
        cur[1:] = np.minimum(sub, prev[1:] + 1)
        # insertions chain left to right: cur[j] = min(cur[j], cur[j-1] + 1)
        cur = np.minimum.accumulate(cur - np.arange(cur.size)) + np.arange(cur.size)
        prev = cur
    return int(prev[-1])


def unit_error_rate(pred, gold) -> float:
    g = dedup(_units(gold))
    if not g:
        raise ValueError("gold sequence is empty")
    return levenshtein(dedup(_units(pred)), g) / len(g)


def corpus_metrics(preds: Sequence, golds: Sequence) -> tuple[float, float]:
    """Pooled (frame accuracy, unit error rate) over a corpus."""
    if len(preds) != len(golds) or not golds:
        raise ValueError("prediction and gold corpora must be non-empty and aligned")
    hits = frames = edits = ref = 0
    for p, g in zip(preds, golds):
        p, g = _units(p), _units(g)
        if p.size != g.size:
            raise ValueError(f"length mismatch: {p.size} vs {g.size}")
        hits += int(np.sum(p == g))
        frames += g.size
        dg = dedup(g)
        edits += levenshtein(dedup(p), dg)
        ref += len(dg)
    return hits / frames, edits / max(ref, 1)


# -- training --------------------------------------------------------------------

@dataclass
class TrainItem:
    id: str
    audio: np.ndarray
    units: np.ndarray


@dataclass
class TrainResult:
    student: Student
    log: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    initial_loss: float = float("nan")  # training-set loss before the first update
    final_loss: float = float("nan")  # training-set loss of the returned parameters
    seconds: float = 0.0


def is_validation(uid: str, percent: int = 10) -> bool:
    h = int.from_bytes(hashlib.blake2b(uid.encode(), digest_size=8).digest(), "little")
    return h % 100 < percent


def split_items(items: Sequence[TrainItem], percent: int = 10) -> tuple[list[TrainItem], list[TrainItem]]:
    """Hash-of-id split. Guarantees at least one item on each side when possible."""
    val = [it for it in items if is_validation(it.id, percent)]
    train = [it for it in items if not is_validation(it.id, percent)]
    if len(items) >= 2 and not val:
        val, train = train[-1:], train[:-1]
    elif len(items) >= 2 and not train:
        train, val = val[:1], val[1:]
    elif len(items) == 1:
        train = val = list(items)
    return train, val


def _batches(lengths: list[int], budget: int, rng: np.random.Generator) -> list[list[int]]:
    order = rng.permutation(len(lengths))
    batches, cur, used = [], [], 0
    for i in order:
        if cur and used + lengths[i] > budget:
            batches.append(cur)
            cur, used = [], 0
        cur.append(int(i))
        used += lengths[i]
    if cur:
        batches.append(cur)
    return batches


class _Trainer:
    def __init__(self, student: Student, mode: TrainMode, cfg: TrainConfig, frontend_cache: dict | None = None):
        self.cache = frontend_cache
        self.s = student
        self.enc = student.encoder
        self.mode = TrainMode(mode)
        self.cfg = cfg
        wf = self.enc.cfg.wf_enabled
        if self.mode is TrainMode.HEAD_ONLY:
            trainable = dict(student.head)
            if wf:
                trainable["wf.logits"] = self.enc.params["wf.logits"]
        else:
            trainable = dict(student.head)
            for k, p in self.enc.params.items():
                if cfg.train_frontend or not k.startswith("frontend."):
                    trainable[k] = p
        self.trainable = trainable

    def frontend(self, item: TrainItem) -> np.ndarray:
        if self.cache is None:
            return self.enc.frontend(item.audio)[0]
        if item.id not in self.cache:
            self.cache[item.id] = self.enc.frontend(item.audio)[0]
        return self.cache[item.id]

    def features(self, item: TrainItem):
        """Per-utterance input to the trainable part of the model, computed once."""
        if self.mode is TrainMode.ENCODER_AND_HEAD:
            return item.audio if self.cfg.train_frontend else self.frontend(item)
        hidden, final, _ = self.enc.stack(self.frontend(item))
        return np.stack(hidden) if self.enc.cfg.wf_enabled else final

    def forward(self, feat, keep: bool):
        enc = self.enc
        if self.mode is TrainMode.HEAD_ONLY:
            if enc.cfg.wf_enabled:
                final, cwf = K.weighted_sum(feat, enc.v("wf.logits"))
                return final, ("wf", cwf)
            return feat, ("none", None)
        if self.cfg.train_frontend:
            h0, cf = enc.frontend(feat, keep=keep)
        else:
            h0, cf = feat, None
        _, final, cs = enc.stack(h0, keep=keep)
        return final, ("enc", (cf, cs))

    def backward(self, dfinal, ctx):
        kind, c = ctx
        enc = self.enc
        if kind == "wf":
            _, dlogits = K.weighted_sum_backward(dfinal, c)
            enc.params["wf.logits"].grad += dlogits
        elif kind == "enc":
            cf, cs = c
            dh0 = enc.stack_backward(dfinal.astype(enc.dtype), cs)
            if cf is not None:
                enc.frontend_backward(dh0, cf)

    def predict(self, feat) -> np.ndarray:
        final, _ = self.forward(feat, keep=False)
        return np.argmax(self.s.head_forward(final)[0], axis=1)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.trainable.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.trainable[k].value = v.copy()


def _check_items(student: Student, items: Sequence[TrainItem]) -> None:
    if not items:
        raise ValueError("empty training corpus")
    for it in items:
        t = student.encoder.n_frames(np.asarray(it.audio).size)
        if t != np.asarray(it.units).size:
            raise ValueError(f"{it.id}: {np.asarray(it.units).size} labels for {t} student frames "
                             "(label frame rate does not match the student)")
        if np.asarray(it.units).max(initial=0) >= student.vocab_size:
            raise ValueError(f"{it.id}: label id outside head vocabulary {student.vocab_size}")


def train(student: Student, items: Sequence[TrainItem], mode: TrainMode | str,
          cfg: TrainConfig | None = None, log_path: str | Path | None = None,
          label_rate_hz: float | None = None, frontend_cache: dict | None = None) -> TrainResult:
    """Cross-entropy distillation with hash-split validation and early stopping.

    ``frontend_cache`` maps utterance id to frozen frontend output. It may be
    shared between students whose frontends are identical (e.g. all
    truncations of one teacher) and is filled on first use.

    Parameters are updated in place; on return the student holds the
    parameters of the trained epoch with the best validation frame accuracy.
    Epoch 0 (the initial parameters) is logged for reference only.
    """
    cfg = cfg or TrainConfig()
    if label_rate_hz and abs(label_rate_hz - student.cfg.frame_rate_hz) > 1e-9:
        raise ValueError(f"label frame rate {label_rate_hz} Hz != student frame rate {student.cfg.frame_rate_hz} Hz")
    _check_items(student, items)
    t0 = time.perf_counter()
    tr = _Trainer(student, mode, cfg, frontend_cache)
    train_items, val_items = split_items(items, cfg.val_percent)
    train_feats = [tr.features(it) for it in train_items]
    val_feats = [tr.features(it) for it in val_items]
    train_units = [np.asarray(it.units, dtype=np.int64) for it in train_items]
    val_units = [np.asarray(it.units, dtype=np.int64) for it in val_items]
    lengths = [u.size for u in train_units]

    def val_acc() -> float:
        hits = sum(int(np.sum(tr.predict(f) == u)) for f, u in zip(val_feats, val_units))
        return hits / sum(u.size for u in val_units)

    def train_loss() -> float:
        total = 0.0
        for f, u in zip(train_feats, train_units):
            final, _ = tr.forward(f, keep=False)
            total += K.cross_entropy(student.head_forward(final)[0], u)[0] * u.size
        return total / sum(lengths)

    rng = np.random.default_rng(cfg.seed)
    opt_state: dict = {}
    step = 0
    result = TrainResult(student, initial_loss=train_loss())
    result.log.append({"epoch": 0, "step": 0, "loss": float("nan"), "frame_acc": val_acc(), "lr": cfg.lr_at(0)})
    best, snap, bad = -1.0, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        losses, weights = [], []
        for batch in _batches(lengths, cfg.batch_frames, rng):
            for p in tr.trainable.values():
                p.zero_grad()
            n_frames = sum(lengths[i] for i in batch)
            batch_loss = 0.0
            for i in batch:
                final, ctx = tr.forward(train_feats[i], keep=True)
                logits, x = student.head_forward(final)
                loss, cce = K.cross_entropy(logits, train_units[i])
                share = lengths[i] / n_frames
                batch_loss += loss * share
                dlogits = K.cross_entropy_backward(share, cce)
                dfinal = student.head_backward(dlogits, x)
                if ctx[0] != "none":
                    tr.backward(dfinal, ctx)
            lr = cfg.lr_at(step)
            K.adamw_step(tr.trainable, opt_state, lr, cfg.weight_decay, lr_scale={"wf.logits": cfg.wf_lr_scale})
            step += 1
            losses.append(batch_loss)
            weights.append(n_frames)
        epoch_loss = float(np.average(losses, weights=weights))
        acc = val_acc()
        result.log.append({"epoch": epoch, "step": step, "loss": epoch_loss, "frame_acc": acc, "lr": cfg.lr_at(step)})
        log.info("epoch %d step %d loss %.4f val_acc %.4f", epoch, step, epoch_loss, acc)
        if acc > best:
            best, bad = acc, 0
            snap = tr.snapshot()
            result.best_epoch = epoch
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    tr.restore(snap)
    result.best_val_acc = best
    result.final_loss = train_loss()
    result.seconds = time.perf_counter() - t0
    if log_path is not None:
        write_train_log(log_path, result.log)
    return result


def write_train_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "step", "loss", "frame_acc", "lr"])
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in r.items()})
