"""Command-line entry point: ``streamdsu <command>`` (or ``python -m streamdsu``).

Exit codes: 0 ok, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import logging
import struct
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline as P
from .config import PROFILES, RunConfig, load_config
from .costmodel import Convention, s2u_report
from . import costmodel
from .encoder import WindowConfig
from .predictor import Student, TrainMode
from .quantizer import write_units
from .streamer import stream_open
from .wavio import PcmReader

log = logging.getLogger("streamdsu")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# -- commands --------------------------------------------------------------------

def cmd_synth(cfg, args):
    P.synth(cfg, args.out)
    for split in P.SPLITS:
        print(P.Layout(args.out).corpus(split))


def cmd_teacher(cfg, args):
    _, book = P.build_teacher(cfg, args.out)
    print(f"teacher: {P.Layout(args.out).teacher} vocab_size={book.vocab_size}")


def cmd_label(cfg, args):
    P.label(cfg, args.out)
    for split in P.SPLITS:
        print(P.Layout(args.out).labels(split))


def cmd_train(cfg, args):
    s = cfg.student
    if args.mode:
        s = replace(s, mode=TrainMode(args.mode).value)
    if args.window:
        s = replace(s, window=str(WindowConfig.parse(args.window)))
    if args.layers is not None:
        s = replace(s, n_layers=args.layers)
    if args.wf is not None:
        s = replace(s, wf=args.wf == "on")
    cfg = replace(cfg, student=s)
    res = P.train_student(cfg, args.out)
    P.write_config(cfg, P.Layout(args.out).student)
    print(f"student: {P.Layout(args.out).student} best_epoch={res.best_epoch} "
          f"val_frame_acc={res.best_val_acc:.4f} seconds={res.seconds:.1f}")


def cmd_eval(cfg, args):
    student = Student.load(args.student) if args.student else None
    metrics = P.evaluate(cfg, args.out, student=student)
    path = Path(args.out) / "eval.csv"
    P.write_metrics(path, metrics)
    sys.stdout.write(path.read_text())


def _student(args) -> Student:
    path = Path(args.student) if args.student else P.Layout(args.out).student
    P.Layout(args.out).require(path / "manifest", "train")
    return Student.load(path).astype(np.float64)


def cmd_infer(cfg, args):
    student = _student(args)
    if args.wavs:
        units = P.infer_files(student, [Path(p) for p in args.wavs])
    else:
        units = P.predict_corpus(student, P.load_audio(args.out, args.split))
    if args.output:
        write_units(args.output, units)
    else:
        for u in units:
            print(" ".join(str(int(v)) for v in u))


def cmd_stream(cfg, args):
    student = _student(args)
    window = WindowConfig.parse(args.window) if args.window else None
    state = stream_open(student, window)
    reader = PcmReader(sys.stdin.buffer)
    out = sys.stdout.buffer

    def emit(ids):
        if ids.size == 0:
            return
        if args.binary:
            out.write(struct.pack(f"<{ids.size}I", *ids.tolist()))
        else:
            out.write("".join(f"{int(u)}\n" for u in ids).encode())
        out.flush()

    while True:
        chunk = reader.read(args.chunk)
        if chunk.size == 0:
            break
        emit(state.push(chunk))
    emit(state.close())


def cmd_flops(cfg, args):
    overrides = {}
    if args.layers is not None:
        overrides["n_layers"] = args.layers
    if args.window:
        overrides["window"] = WindowConfig.parse(args.window)
    prof = args.profile or cfg.cost.profile
    enc_cfg, vocab = costmodel.profile(prof, **overrides)
    conv = Convention[(args.convention or cfg.cost.convention).upper()]
    seconds = args.seconds if args.seconds is not None else cfg.cost.seconds
    report = s2u_report(enc_cfg, seconds, conv, args.vocab or vocab)
    sys.stdout.write(report.to_csv())
    print(report.summary())


def cmd_sweep(cfg, args):
    from .sweep import run_sweep

    path = run_sweep(cfg, Path(args.out), jobs=args.jobs)
    print(path)


def cmd_pareto(cfg, args):
    from .sweep import pareto_rows, read_runs, write_pareto

    runs = Path(args.runs) if args.runs else Path(args.out) / "sweep" / "runs.csv"
    rows = read_runs(runs)
    if not rows:
        raise UsageError(f"{runs}: no runs")
    front = pareto_rows(rows, args.cost, args.metric, maximize=args.maximize)
    dest = Path(args.output) if args.output else runs.with_name("pareto.csv")
    write_pareto(front, dest)
    sys.stdout.write(dest.read_text())


# -- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="streamdsu", description="Streaming DSU extraction experiments on a synthetic corpus.")
    p.add_argument("--config", help="INI config file (see docs/config.md)")
    p.add_argument("--preset", choices=sorted(PROFILES), help="built-in base profile (default: 'default')")
    p.add_argument("--seed", type=int, help="override [train] seed")
    p.add_argument("--out", default="runs/default", help="run directory (default: %(default)s)")
    p.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", help="generate the synthetic train/eval corpus").set_defaults(fn=cmd_synth)
    sub.add_parser("teacher", help="build the teacher encoder and k-means codebook").set_defaults(fn=cmd_teacher)
    sub.add_parser("label", help="label both splits with teacher units").set_defaults(fn=cmd_label)

    t = sub.add_parser("train", help="distil a student from the teacher labels")
    t.add_argument("--mode", choices=[m.value for m in TrainMode])
    t.add_argument("--window", help="attention window, e.g. 8,1,8 or full")
    t.add_argument("--layers", type=int)
    t.add_argument("--wf", choices=["on", "off"])
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score the student on the eval split")
    e.add_argument("--student", help="student checkpoint dir (default: <out>/student)")
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="offline unit extraction")
    i.add_argument("wavs", nargs="*", help="WAV files (default: the whole --split)")
    i.add_argument("--split", choices=P.SPLITS, default="eval")
    i.add_argument("--student")
    i.add_argument("--output", "-o", help="units file (default: stdout)")
    i.set_defaults(fn=cmd_infer)

    s = sub.add_parser("stream", help="stream PCM/WAV from stdin, print unit ids as they become final")
    s.add_argument("--student")
    s.add_argument("--window", help="override the student's attention window")
    s.add_argument("--chunk", type=int, default=1600, help="samples per read (default: %(default)s)")
    s.add_argument("--binary", action="store_true", help="write little-endian uint32 ids instead of text")
    s.set_defaults(fn=cmd_stream)

    f = sub.add_parser("flops", help="analytical TFLOPs per minute of audio")
    f.add_argument("--profile", choices=["paper", "desk"], help="model dimensions (default: [cost] profile)")
    f.add_argument("--layers", type=int)
    f.add_argument("--window")
    f.add_argument("--convention", choices=["full", "compat", "FULL", "COMPAT"])
    f.add_argument("--seconds", type=float)
    f.add_argument("--vocab", type=int)
    f.set_defaults(fn=cmd_flops)

    sub.add_parser("sweep", help="train and score every [sweep] grid cell").set_defaults(fn=cmd_sweep)

    r = sub.add_parser("pareto", help="extract the cost/metric Pareto front from runs.csv")
    r.add_argument("--runs", help="runs.csv (default: <out>/sweep/runs.csv)")
    r.add_argument("--cost", default="tflops_full")
    r.add_argument("--metric", default="unit_error_rate")
    r.add_argument("--maximize", action="store_true", help="higher metric is better (e.g. frame_acc)")
    r.add_argument("--output", "-o")
    r.set_defaults(fn=cmd_pareto)
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed))
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 1, --help exits 0
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("streamdsu: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"streamdsu: config error: {exc}", file=sys.stderr)
        return 1
    try:
        args.fn(cfg, args)
    except UsageError as exc:
        print(f"streamdsu: {exc}", file=sys.stderr)
        return 1
    except (P.MissingArtifact, KeyError) as exc:
        print(f"streamdsu: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"streamdsu: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
