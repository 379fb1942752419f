import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from streamdsu import pipeline as P
from streamdsu.cli import main
from streamdsu.config import parse_config
from streamdsu.quantizer import read_units
from streamdsu.sweep import COLUMNS, SCHEMA, cells_dir, read_runs, run_sweep, trend_report

TINY_INI = """
[corpus]
n_phones = 4
train_utts = 12
eval_utts = 4
min_seconds = 0.4
max_seconds = 0.8
[teacher]
n_layers = 2
d_model = 16
n_heads = 2
d_ffn = 32
vocab_size = 8
kmeans_iters = 10
[student]
n_layers = 1
window = 2,1,2
[train]
max_epochs = 2
batch_frames = 400
[sweep]
windows = 0,0;1,1;2,2;4,0
layer_counts = 1,2
seeds = 0
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY_INI)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, tiny_cfg):
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.ini").write_text(TINY_INI)
    P.synth(tiny_cfg, root)
    P.build_teacher(tiny_cfg, root)
    P.label(tiny_cfg, root)
    P.train_student(tiny_cfg, root)
    return root


def cli(root, *args, stdin=None):
    env = dict(os.environ, PYTHONHASHSEED="0")
    return subprocess.run([sys.executable, "-m", "streamdsu", "--config", str(root / "tiny.ini"), "--out", str(root),
                           *args], input=stdin, capture_output=True, env=env, timeout=600)


def test_layout_and_config_embedded(run_dir, tiny_cfg):
    lay = P.Layout(run_dir)
    for path in (lay.corpus("train") / "manifest", lay.corpus("eval") / "labels", lay.teacher / "manifest",
                 lay.codebook, lay.labels("train"), lay.labels("eval"), lay.student / "train_log.csv"):
        assert path.exists(), path
    assert parse_config((run_dir / "config.ini").read_text()) == tiny_cfg


def test_labels_match_frames(run_dir):
    items = P.load_items(run_dir, "train")
    assert len(items) == 12
    assert all(it.units.max() < 8 for it in items)


def test_labeling_is_deterministic(run_dir, tiny_cfg, tmp_path):
    before = P.Layout(run_dir).labels("eval").read_text()
    P.label(tiny_cfg, run_dir)
    assert P.Layout(run_dir).labels("eval").read_text() == before


def test_evaluate_ranges(run_dir, tiny_cfg):
    m = P.evaluate(tiny_cfg, run_dir)
    for k in ("frame_acc", "purity", "nmi"):
        assert 0.0 <= m[k] <= 1.0
    assert m["unit_error_rate"] >= 0
    assert m["receptive_field"] == 5 and m["latency"] == 3
    assert m["tflops_full"] > m["tflops_compat"] > 0


def test_missing_artifacts(tmp_path, tiny_cfg):
    with pytest.raises(P.MissingArtifact, match="synth"):
        P.load_audio(tmp_path, "train")
    with pytest.raises(P.MissingArtifact, match="teacher"):
        P.label(tiny_cfg, tmp_path)


def test_cli_missing_input_exit_code(tmp_path):
    (tmp_path / "tiny.ini").write_text(TINY_INI)
    r = cli(tmp_path, "eval")
    assert r.returncode == 2
    assert b"not found" in r.stderr


def test_cli_usage_exit_code(tmp_path):
    assert main(["no-such-command"]) == 1
    assert main(["train", "--mode", "everything"]) == 1
    assert main(["--jobs", "0", "flops"]) == 1
    (tmp_path / "bad.ini").write_text("[nope]\n")
    assert main(["--config", str(tmp_path / "bad.ini"), "flops"]) == 1


def test_cli_flops_compat_baseline(capsys):
    assert main(["flops", "--profile", "paper", "--layers", "21", "--window", "full", "--convention", "compat"]) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert out[0] == "component,flops"
    key, conv = out[-1].split()
    assert conv == "convention=COMPAT"
    assert float(key.split("=")[1]) == pytest.approx(1.936, abs=0.10)


def test_stream_reproduces_infer(run_dir, tmp_path):
    wavs = sorted((P.Layout(run_dir).corpus("eval") / "wav").glob("*.wav"))[:2]
    units_file = tmp_path / "infer.units"
    r = cli(run_dir, "infer", *map(str, wavs), "-o", str(units_file))
    assert r.returncode == 0, r.stderr
    expected = units_file.read_text().splitlines()
    for wav, line in zip(wavs, expected):
        for chunk in ("1", "333", "100000"):
            s = cli(run_dir, "stream", "--chunk", chunk, stdin=wav.read_bytes())
            assert s.returncode == 0, s.stderr
            assert " ".join(s.stdout.decode().split("\n")).strip() == line
    s = cli(run_dir, "stream", "--binary", stdin=wavs[0].read_bytes())
    assert np.frombuffer(s.stdout, "<u4").tolist() == [int(v) for v in expected[0].split()]


def test_cli_train_overrides(run_dir):
    r = cli(run_dir, "train", "--mode", "head_only", "--window", "full", "--layers", "2", "--wf", "off")
    assert r.returncode == 0, r.stderr
    r = cli(run_dir, "eval")
    assert r.returncode == 0, r.stderr
    row = next(csv.DictReader(r.stdout.decode().splitlines()))
    assert row["window"] == "inf,1,inf" and row["n_layers"] == "2"
    # the head-only student with the full teacher stack reproduces the labels
    assert float(row["frame_acc"]) >= 0.99


def _content(path):
    rows = read_runs(path)
    return [{k: v for k, v in r.items() if k != "train_seconds"} for r in rows]


def test_sweep_count_resume_and_pareto(run_dir, tiny_cfg):
    path = run_sweep(tiny_cfg, run_dir)
    text = path.read_text()
    assert text.splitlines()[0] == SCHEMA
    rows = read_runs(path)
    assert len(rows) == 4 * 2
    assert list(rows[0]) == COLUMNS
    for r in rows:
        assert 0 <= float(r["frame_acc"]) <= 1 and float(r["unit_error_rate"]) >= 0

    records = {r["run_id"]: cells_dir(run_dir) / r["run_id"] / "record.csv" for r in rows}
    mtimes = {k: p.stat().st_mtime_ns for k, p in records.items()}
    assert run_sweep(tiny_cfg, run_dir).read_text() == text  # nothing retrained, identical CSV
    assert {k: p.stat().st_mtime_ns for k, p in records.items()} == mtimes

    victim = rows[3]["run_id"]
    records[victim].unlink()
    run_sweep(tiny_cfg, run_dir)
    changed = {k for k, p in records.items() if p.stat().st_mtime_ns != mtimes[k]}
    assert changed == {victim}
    assert _content(path) == _content_from(text)

    r = cli(run_dir, "pareto", "--cost", "tflops_full", "--metric", "frame_acc", "--maximize")
    assert r.returncode == 0, r.stderr
    front = read_runs(path.with_name("pareto.csv"))
    costs = [float(f["tflops_full"]) for f in front]
    assert costs == sorted(costs) and 1 <= len(front) <= len(rows)
    for f in front:
        assert not any(float(o["tflops_full"]) <= float(f["tflops_full"]) and float(o["frame_acc"]) >= float(f["frame_acc"])
                       and (float(o["tflops_full"]), float(o["frame_acc"])) != (float(f["tflops_full"]), float(f["frame_acc"]))
                       for o in rows)
    assert cli(run_dir, "pareto", "--metric", "bogus").returncode == 2


def _content_from(text):
    rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
    return [{k: v for k, v in r.items() if k != "train_seconds"} for r in rows]


def test_units_file_roundtrip(run_dir):
    units = read_units(P.Layout(run_dir).labels("eval"))
    assert len(units) == 4


def test_trend_report_on_constructed_rows():
    rows = []
    for s in range(3):
        for k in (0, 1, 2, 4, 8):
            rows.append(dict(window=f"{k},1,{k}", wf="0", mode="encoder_and_head", seed=s, n_layers=2,
                             frame_acc=0.5 + 0.01 * k + 0.001 * s))
            rows.append(dict(window=f"{k},1,{k}", wf="1", mode="encoder_and_head", seed=s, n_layers=2,
                             frame_acc=0.5 + 0.01 * k + 0.002))
            if k:
                rows.append(dict(window=f"{2 * k},1,0", wf="0", mode="encoder_and_head", seed=s, n_layers=2,
                                 frame_acc=0.5 + 0.01 * k - 0.003 + 0.001 * s))
        rows.append(dict(window="2,1,2", wf="0", mode="head_only", seed=s, n_layers=2, frame_acc=0.4))
        rows.append(dict(window="2,1,2", wf="0", mode="encoder_and_head", seed=s, n_layers=4, frame_acc=0.0))
    t = trend_report(rows)
    assert t["n_layers"] == 2 and t["seeds"] == [0, 1, 2]
    assert t["spearman"] == pytest.approx(1.0)
    assert t["sym_minus_past"] == pytest.approx(0.003)
    assert t["eh_minus_head_only"] == pytest.approx(0.12 + 0.001)
    # WF rows lack the per-seed offset, past-only windows have no WF counterpart
    assert t["wf_on_minus_off"] == pytest.approx(0.002 - 0.001)
    assert trend_report([r for r in rows if r["mode"] != "head_only"])["eh_minus_head_only"] is None
