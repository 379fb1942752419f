"""Grid sweeps over student configurations, with per-cell resume.

Each cell (window, depth, WF, mode, seed) gets an id from the hash of every
config section that affects its result. A finished cell leaves
``cells/<id>/record.csv``; cells with a record are skipped on rerun, and a
cell without one (crashed or deleted) is trained again from scratch.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import pipeline as P
from .config import RunConfig
from .costmodel import pareto_front

log = logging.getLogger(__name__)

SCHEMA = "#schema=1"
COLUMNS = ["run_id", "window", "left", "right", "n_layers", "wf", "mode", "seed",
           "tflops_full", "tflops_compat", "receptive_field", "latency",
           "frame_acc", "unit_error_rate", "purity", "nmi", "train_seconds", "best_epoch"]
WALL_CLOCK = ("train_seconds",)


def cell_config(cfg: RunConfig, cell: dict) -> RunConfig:
    student = replace(cfg.student, window=cell["window"], n_layers=cell["n_layers"], wf=cell["wf"], mode=cell["mode"])
    return replace(cfg, student=student, train=replace(cfg.train, seed=cell["seed"]))


def cell_id(cfg: RunConfig, cell: dict) -> str:
    c = cell_config(cfg, cell)
    h = hashlib.blake2b(digest_size=8)
    for name in ("corpus", "teacher", "student", "train"):
        h.update(f"[{name}]{getattr(c, name)!r}".encode())
    return h.hexdigest()


def cells_dir(root: Path) -> Path:
    return Path(root) / "sweep" / "cells"


def read_record(path: Path) -> dict | None:
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(line for line in fh if not line.startswith("#")))
    return rows[0] if len(rows) == 1 else None


def _write_rows(path: Path, rows: list[dict]) -> None:
    buf = io.StringIO()
    buf.write(SCHEMA + "\n")
    w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


# cached per worker process: train items, eval audio and frozen frontend outputs
_WORKER: dict = {}


def _worker_data(root: Path):
    key = str(root)
    if _WORKER.get("root") != key:
        _WORKER.clear()
        _WORKER.update(root=key, items=P.load_items(root, "train"), eval=P.load_audio(root, "eval"), frontend={})
    return _WORKER


def run_cell(cfg: RunConfig, root: Path, cell: dict) -> dict:
    root = Path(root)
    rid = cell_id(cfg, cell)
    out = cells_dir(root) / rid
    done = read_record(out / "record.csv")
    if done is not None:
        return done
    shutil.rmtree(out, ignore_errors=True)
    out.mkdir(parents=True)
    ccfg = cell_config(cfg, cell)
    data = _worker_data(root)
    res = P.train_student(ccfg, root, out_dir=out, seed=cell["seed"], items=data["items"],
                          frontend_cache=data["frontend"] if not ccfg.train.train_frontend else None)
    m = P.evaluate(ccfg, root, student=res.student, eval_audio=data["eval"])
    w = ccfg.student.window_cfg
    row = {
        "run_id": rid, "window": str(w), "left": P._cell(float(w.left)), "right": P._cell(float(w.right)),
        "n_layers": cell["n_layers"], "wf": int(cell["wf"]), "mode": cell["mode"], "seed": cell["seed"],
        "train_seconds": f"{res.seconds:.3f}", "best_epoch": res.best_epoch,
    }
    for k in ("tflops_full", "tflops_compat", "receptive_field", "latency",
              "frame_acc", "unit_error_rate", "purity", "nmi"):
        row[k] = P._cell(float(m[k]))
    row = {k: str(v) for k, v in row.items()}
    _write_rows(out / "record.csv", [row])
    log.info("cell %s %s n=%s wf=%s %s seed=%s acc=%s", rid, row["window"], row["n_layers"], row["wf"],
             row["mode"], row["seed"], row["frame_acc"])
    return row


def ensure_prerequisites(cfg: RunConfig, root: Path) -> None:
    lay = P.Layout(root)
    if not (lay.corpus("eval") / "manifest").exists():
        P.synth(cfg, lay.root)
    if not (lay.teacher / "manifest").exists():
        P.build_teacher(cfg, lay.root)
    if not lay.labels("eval").exists():
        P.label(cfg, lay.root)


def run_sweep(cfg: RunConfig, root: Path, jobs: int = 1) -> Path:
    """Train every grid cell not already recorded; write ``sweep/runs.csv`` in grid order."""
    root = Path(root)
    ensure_prerequisites(cfg, root)
    cells = cfg.sweep.grid()
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            rows = list(pool.map(run_cell, [cfg] * len(cells), [root] * len(cells), cells))
    else:
        rows = [run_cell(cfg, root, c) for c in cells]
    path = root / "sweep" / "runs.csv"
    _write_rows(path, rows)
    P.write_config(cfg, root / "sweep")
    return path


def read_runs(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def pareto_rows(rows: list[dict], cost_col: str, metric_col: str, maximize: bool = False) -> list[dict]:
    """Rows on the (cost, metric) front, sorted by cost. ``maximize`` treats higher metric as better."""
    if not rows:
        raise ValueError("no runs to extract a front from")
    for col in (cost_col, metric_col):
        if col not in rows[0]:
            raise KeyError(f"column {col!r} not in runs ({', '.join(rows[0])})")
    sign = -1.0 if maximize else 1.0
    pts = [(float(r[cost_col]), sign * float(r[metric_col]), i) for i, r in enumerate(rows)]
    return [rows[p[2]] for p in pareto_front(pts)]


def write_pareto(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SCHEMA + "\n")
        w = csv.DictWriter(fh, list(rows[0].keys()), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


# -- qualitative trends across seeds ----------------------------------------------

def trend_report(rows: list[dict], metric: str = "frame_acc", ks=(0, 1, 2, 4, 8), n_layers: int | None = None) -> dict:
    """Seed-averaged comparisons at one student depth (default: the shallowest in ``rows``).

    * ``spearman``: rank correlation of symmetric window size k and the mean metric (WF off).
    * ``sym_minus_past``: (k,1,k) minus past-only (2k,1,0), same receptive field.
    * ``wf_on_minus_off``: over every window present with both settings.
    * ``eh_minus_head_only``: over windows that have head-only cells.

    Differences are averaged per seed first, then across seeds; comparisons
    whose cells are missing come back as None.
    """
    from scipy.stats import spearmanr

    eh, ho = "encoder_and_head", "head_only"
    if n_layers is None:
        n_layers = min(int(r["n_layers"]) for r in rows)
    rows = [r for r in rows if int(r["n_layers"]) == n_layers]
    val = {(r["window"], r["wf"], r["mode"], int(r["seed"])): float(r[metric]) for r in rows}
    seeds = sorted({s for *_, s in val})
    windows = sorted({w for w, _, m, _ in val if m == eh})

    def mean_diff(pairs):
        per_seed = []
        for s in seeds:
            d = [val[a + (s,)] - val[b + (s,)] for a, b in pairs if a + (s,) in val and b + (s,) in val]
            if d:
                per_seed.append(sum(d) / len(d))
        return (sum(per_seed) / len(per_seed), per_seed) if per_seed else (None, [])

    out = {"n_layers": n_layers, "seeds": seeds, "n_cells": len(val)}
    sym = [[val.get((f"{k},1,{k}", "0", eh, s)) for s in seeds] for k in ks]
    if all(v is not None for col in sym for v in col) and seeds:
        means = [sum(col) / len(col) for col in sym]
        out["window_means"] = dict(zip(ks, means))
        out["spearman"] = float(spearmanr(ks, means).statistic)
    else:
        out["spearman"] = None
    out["sym_minus_past"], out["sym_minus_past_per_seed"] = mean_diff(
        [((f"{k},1,{k}", "0", eh), (f"{2 * k},1,0", "0", eh)) for k in ks if k > 0])
    out["wf_on_minus_off"], out["wf_per_seed"] = mean_diff([((w, "1", eh), (w, "0", eh)) for w in windows])
    out["eh_minus_head_only"], out["mode_per_seed"] = mean_diff([((w, "0", eh), (w, "0", ho)) for w in windows])
    return out
