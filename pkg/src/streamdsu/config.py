"""Run configuration: INI sections mapped onto dataclasses.

Two built-in profiles exist. ``default`` is the desk-scale experiment
(P=8 phones, 200/40 utterances of 2-6 s). ``mini`` is a cut-down corpus for
multi-seed sweeps. A config file may name a base profile under
``[run] profile`` and override any key. See docs/config.md.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .encoder import WindowConfig
from .predictor import TrainConfig, TrainMode


@dataclass(frozen=True)
class CorpusConfig:
    n_phones: int = 8
    train_utts: int = 200
    eval_utts: int = 40
    min_seconds: float = 2.0
    max_seconds: float = 6.0
    seed: int = 0


@dataclass(frozen=True)
class TeacherConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    similarity_gain: float = 1.0
    vocab_size: int = 32
    kmeans_iters: int = 50
    seed: int = 0


@dataclass(frozen=True)
class StudentConfig:
    n_layers: int = 4
    window: str = "8,1,8"
    wf: bool = False
    mode: str = "encoder_and_head"
    warm_start: bool = True
    wf_top_logit: float = 3.0  # initial layer-weight logit of the top layer (others start at 0)

    @property
    def window_cfg(self) -> WindowConfig:
        return WindowConfig.parse(self.window)

    @property
    def train_mode(self) -> TrainMode:
        return TrainMode(self.mode)


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 1e-6
    lr_decay: float = 0.9
    decay_every: int = 1000
    max_epochs: int = 10
    patience: int = 1
    batch_frames: int = 4000
    seed: int = 0
    train_frontend: bool = False
    wf_lr_scale: float = 30.0

    def to_train_config(self, seed: int | None = None) -> TrainConfig:
        kw = asdict(self)
        if seed is not None:
            kw["seed"] = seed
        return TrainConfig(**kw)


@dataclass(frozen=True)
class SweepConfig:
    windows: str = "0,0;1,1;2,2;4,4;8,8"  # (l, r) pairs, center is always 1
    layer_counts: str = "4,2"
    wf: str = "off"  # off, on, or both
    modes: str = "encoder_and_head"
    seeds: str = "0"

    def grid(self) -> list[dict]:
        windows = [w.strip() for w in self.windows.split(";") if w.strip()]
        layers = [int(v) for v in self.layer_counts.split(",") if v.strip()]
        wf = {"off": [False], "on": [True], "both": [False, True]}[self.wf.strip().lower()]
        modes = [TrainMode(m.strip()).value for m in self.modes.split(",") if m.strip()]
        seeds = [int(v) for v in self.seeds.split(",") if v.strip()]
        if not (windows and layers and modes and seeds):
            raise ValueError("sweep grid has an empty axis")
        cells = []
        for w in windows:
            window = str(WindowConfig.parse(w))
            for n in layers:
                for f in wf:
                    for m in modes:
                        for s in seeds:
                            cells.append({"window": window, "n_layers": n, "wf": f, "mode": m, "seed": s})
        return cells


@dataclass(frozen=True)
class CostSection:
    profile: str = "desk"
    convention: str = "FULL"
    seconds: float = 60.0


@dataclass(frozen=True)
class RunConfig:
    profile: str = "default"
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    cost: CostSection = field(default_factory=CostSection)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"profile": self.profile}
        for name in SECTIONS:
            cp[name] = {k: _fmt(v) for k, v in asdict(getattr(self, name)).items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def digest(self, *extra: str) -> str:
        """64-bit identity of the resolved config (hex)."""
        h = hashlib.blake2b(self.to_ini().encode(), digest_size=8)
        for e in extra:
            h.update(e.encode())
        return h.hexdigest()


SECTIONS = {"corpus": CorpusConfig, "teacher": TeacherConfig, "student": StudentConfig,
            "train": TrainSection, "sweep": SweepConfig, "cost": CostSection}

PROFILES = {
    "default": RunConfig(),
    "mini": RunConfig(
        profile="mini",
        corpus=CorpusConfig(train_utts=60, eval_utts=20, min_seconds=1.0, max_seconds=3.0),
        student=StudentConfig(n_layers=2),
        train=TrainSection(max_epochs=6, batch_frames=2000),
        sweep=SweepConfig(windows="0,0;1,1;2,2;4,4;8,8;2,0;4,0;8,0;16,0", layer_counts="2", wf="both",
                          seeds="0,1,2"),
    ),
}


def _fmt(v) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _coerce(kind, text: str):
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text.strip())


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    unknown = set(cp.sections()) - set(SECTIONS) - {"run"}
    if unknown:
        raise ValueError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    profile = cp.get("run", "profile", fallback=None)
    if base is None:
        if profile is not None and profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        base = PROFILES[profile or "default"]
    cfg = base
    for name, klass in SECTIONS.items():
        if not cp.has_section(name):
            continue
        types = {f.name: f.type for f in fields(klass)}
        kw = {}
        for key, raw in cp[name].items():
            if key not in types:
                raise ValueError(f"unknown key [{name}] {key}")
            kind = {"int": int, "float": float, "bool": bool, "str": str}[types[key]]
            kw[key] = _coerce(kind, raw)
        cfg = replace(cfg, **{name: replace(getattr(cfg, name), **kw)})
    if profile is not None:
        cfg = replace(cfg, profile=profile)
    return cfg


def load_config(path: str | Path | None = None, profile: str | None = None) -> RunConfig:
    if path is None:
        if profile is not None and profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        return PROFILES[profile or "default"]
    base = PROFILES[profile] if profile else None
    return parse_config(Path(path).read_text(), base)
