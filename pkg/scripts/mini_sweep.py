"""Run the mini sweep (or any configured sweep) and summarise the trends.

    python3 scripts/mini_sweep.py --out runs/mini [--config my.ini] [--jobs 2]

Writes <out>/sweep/runs.csv and <out>/sweep/pareto.csv (unit error rate vs
FULL-convention TFLOPs) and prints seed-averaged trend comparisons.
"""
import argparse
import logging
import time
from pathlib import Path

from streamdsu.config import load_config
from streamdsu.sweep import pareto_rows, read_runs, run_sweep, trend_report, write_pareto


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/mini")
    ap.add_argument("--config")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, None if args.config else "mini")
    t0 = time.perf_counter()
    path = run_sweep(cfg, Path(args.out), jobs=args.jobs)
    rows = read_runs(path)
    print(f"{len(rows)} cells in {time.perf_counter() - t0:.0f}s -> {path}")

    front = pareto_rows(rows, "tflops_full", "unit_error_rate")
    write_pareto(front, path.with_name("pareto.csv"))
    print("pareto (tflops_full, unit_error_rate):")
    for r in front:
        print(f"  {r['window']:>9} n={r['n_layers']} wf={r['wf']} seed={r['seed']}: "
              f"{float(r['tflops_full']):.5f} {float(r['unit_error_rate']):.4f}")

    t = trend_report(rows)
    print(f"depth {t['n_layers']}, seeds {t['seeds']}")
    if t.get("window_means"):
        print("mean frame accuracy by symmetric window:",
              ", ".join(f"{k}: {v:.4f}" for k, v in t["window_means"].items()))
        print(f"spearman(window, accuracy) = {t['spearman']:.3f}")
    for key in ("sym_minus_past", "wf_on_minus_off", "eh_minus_head_only"):
        if t[key] is not None:
            print(f"{key} = {t[key]:+.4f}")


if __name__ == "__main__":
    main()
