"""Experiment steps over a run directory.

Layout under the run root::

    config.ini                 resolved configuration
    corpus/{train,eval}/       manifest, labels, wav/
    teacher/                   teacher encoder checkpoint
    teacher/codebook/          k-means codebook
    labels/{train,eval}.units  teacher units, one utterance per line
    student/                   student checkpoint + train_log.csv
    eval.csv                   metrics of the student on the eval split
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .costmodel import Convention, cost_s2u
from .encoder import Encoder, WindowConfig, desk_config, receptive_field, theoretical_latency
from .predictor import Student, TrainItem, TrainResult, corpus_metrics, train
from .quantizer import Codebook, assign, kmeans_fit, read_units, write_units
from .synthcorpus import cluster_quality, gen_corpus, read_labels, read_manifest
from .wavio import read_wav

log = logging.getLogger(__name__)
SPLITS = ("train", "eval")


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class Layout:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def corpus(self, split: str) -> Path:
        return self.root / "corpus" / split

    @property
    def teacher(self) -> Path:
        return self.root / "teacher"

    @property
    def codebook(self) -> Path:
        return self.root / "teacher" / "codebook"

    def labels(self, split: str) -> Path:
        return self.root / "labels" / f"{split}.units"

    @property
    def student(self) -> Path:
        return self.root / "student"

    def require(self, path: Path, step: str) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} not found; run `{step}` first")
        return path


def write_config(cfg: RunConfig, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.ini").write_text(cfg.to_ini())


# -- steps -----------------------------------------------------------------------

def synth(cfg: RunConfig, root: Path) -> None:
    lay = Layout(root)
    c = cfg.corpus
    bounds = (c.min_seconds, c.max_seconds)
    for split, n in (("train", c.train_utts), ("eval", c.eval_utts)):
        gen_corpus(n, c.n_phones, c.seed, lay.corpus(split), bounds, prefix=split)
    write_config(cfg, lay.root)


def teacher_encoder_config(cfg: RunConfig):
    t = cfg.teacher
    return desk_config(n_layers=t.n_layers, d_model=t.d_model, n_heads=t.n_heads, d_ffn=t.d_ffn,
                       window=WindowConfig.full(), seed=t.seed)


def load_audio(root: Path, split: str) -> list[tuple[str, np.ndarray]]:
    lay = Layout(root)
    lay.require(lay.corpus(split) / "manifest", "synth")
    return [(e.id, read_wav(e.path)) for e in read_manifest(lay.corpus(split))]


def build_teacher(cfg: RunConfig, root: Path) -> tuple[Encoder, Codebook]:
    """Random-init teacher plus a k-means codebook over its top-layer train features."""
    lay = Layout(root)
    audio = load_audio(root, "train")
    teacher = Encoder.create(teacher_encoder_config(cfg), similarity_gain=cfg.teacher.similarity_gain)
    t64 = teacher.astype(np.float64)
    feats = np.concatenate([t64.encode(x).final.frames for _, x in audio])
    book = kmeans_fit(feats, cfg.teacher.vocab_size, iters=cfg.teacher.kmeans_iters, seed=cfg.teacher.seed,
                      trained_on=f"teacher top layer, train split ({len(audio)} utterances)")
    teacher.save(lay.teacher)
    book.save(lay.codebook)
    write_config(cfg, lay.root)
    return teacher, book


def load_teacher(root: Path) -> tuple[Encoder, Codebook]:
    lay = Layout(root)
    lay.require(lay.teacher / "manifest", "teacher")
    return Encoder.load(lay.teacher), Codebook.load(lay.codebook)


def label(cfg: RunConfig, root: Path) -> None:
    lay = Layout(root)
    teacher, book = load_teacher(root)
    t64 = teacher.astype(np.float64)
    lay.labels("train").parent.mkdir(parents=True, exist_ok=True)
    for split in SPLITS:
        units = [assign(book, t64.encode(x).final) for _, x in load_audio(root, split)]
        write_units(lay.labels(split), units)


def load_items(root: Path, split: str) -> list[TrainItem]:
    lay = Layout(root)
    lay.require(lay.labels(split), "label")
    audio = load_audio(root, split)
    units = read_units(lay.labels(split))
    if len(units) != len(audio):
        raise ValueError(f"{lay.labels(split)}: {len(units)} lines for {len(audio)} utterances")
    return [TrainItem(uid, x, u.units) for (uid, x), u in zip(audio, units)]


def make_student(teacher: Encoder, book: Codebook, n_layers: int, window: WindowConfig, wf: bool,
                 warm_start: bool = True, seed: int = 0, wf_top_logit: float = 0.0) -> Student:
    enc = teacher.truncated(n_layers, window=window, wf_enabled=wf)
    if wf:
        enc.params["wf.logits"].value[-1] = wf_top_logit
    return Student.create(enc, book, vocab_size=book.vocab_size, warm_start=warm_start, seed=seed)


def train_student(cfg: RunConfig, root: Path, out_dir: Path | None = None, seed: int | None = None,
                  frontend_cache: dict | None = None, items: list[TrainItem] | None = None) -> TrainResult:
    lay = Layout(root)
    teacher, book = load_teacher(root)
    s = cfg.student
    student = make_student(teacher, book, s.n_layers, s.window_cfg, s.wf, s.warm_start,
                           seed=cfg.train.seed if seed is None else seed, wf_top_logit=s.wf_top_logit)
    items = load_items(root, "train") if items is None else items
    out_dir = lay.student if out_dir is None else Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = train(student, items, s.train_mode, cfg.train.to_train_config(seed), log_path=out_dir / "train_log.csv",
                label_rate_hz=teacher.cfg.frame_rate_hz, frontend_cache=frontend_cache)
    student.save(out_dir, {"mode": s.mode, "train_seconds": f"{res.seconds:.3f}"})
    return res


def predict_corpus(student: Student, audio: list[tuple[str, np.ndarray]]) -> list[np.ndarray]:
    """Offline float64 inference for every utterance."""
    s64 = student.astype(np.float64)
    out = []
    for _, x in audio:
        logits, _ = s64.head_forward(s64.encoder.encode(x).final.frames)
        out.append(np.argmax(logits, axis=1))
    return out


def evaluate(cfg: RunConfig, root: Path, student: Student | None = None,
             eval_audio: list | None = None) -> dict:
    lay = Layout(root)
    if student is None:
        lay.require(lay.student / "manifest", "train")
        student = Student.load(lay.student)
    audio = load_audio(root, "eval") if eval_audio is None else eval_audio
    gold = [u.units for u in read_units(lay.require(lay.labels("eval"), "label"))]
    preds = predict_corpus(student, audio)
    acc, uer = corpus_metrics(preds, gold)
    purity, nmi = cluster_quality(preds, read_labels(lay.corpus("eval")))
    ecfg = student.cfg
    return {
        "window": str(ecfg.window),
        "n_layers": ecfg.n_layers,
        "wf": int(ecfg.wf_enabled),
        "tflops_full": cost_s2u(ecfg, cfg.cost.seconds, Convention.FULL, student.vocab_size),
        "tflops_compat": cost_s2u(ecfg, cfg.cost.seconds, Convention.COMPAT, student.vocab_size),
        "receptive_field": receptive_field(ecfg.window, ecfg.n_layers),
        "latency": theoretical_latency(ecfg.window, ecfg.n_layers),
        "frame_acc": acc,
        "unit_error_rate": uer,
        "purity": purity,
        "nmi": nmi,
    }


def write_metrics(path: Path, metrics: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(metrics.keys())
        w.writerow(_cell(v) for v in metrics.values())


def _cell(v) -> str:
    if isinstance(v, float):
        return "inf" if v == float("inf") else f"{v:.6g}"
    return str(v)


def infer_files(student: Student, paths: list[Path]) -> list[np.ndarray]:
    return predict_corpus(student, [(str(p), read_wav(p)) for p in paths])


def run_all(cfg: RunConfig, root: Path) -> dict:
    """synth -> teacher -> label -> train -> eval, timing each step."""
    times = {}
    for name, fn in (("synth", synth), ("teacher", build_teacher), ("label", label), ("train", train_student)):
        t0 = time.perf_counter()
        fn(cfg, root)
        times[name] = time.perf_counter() - t0
    metrics = evaluate(cfg, root)
    write_metrics(Layout(root).root / "eval.csv", metrics)
    return {**metrics, **{f"seconds_{k}": v for k, v in times.items()}}
