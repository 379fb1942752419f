"""Print analytical TFLOPs per minute of audio for encoder/window/depth variants.

    python3 scripts/flops_table.py [--profile paper|desk] [--seconds 60]
"""
import argparse
import csv
import sys

from streamdsu.costmodel import Convention, profile, s2u_report
from streamdsu.encoder import WindowConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--profile", default="paper", choices=["paper", "desk"])
    ap.add_argument("--seconds", type=float, default=60.0)
    args = ap.parse_args()

    base, _ = profile(args.profile)
    depths = sorted({base.n_layers, 21, 18, 12, 6} if args.profile == "paper" else {4, 2, 1}, reverse=True)
    windows = ["full", "inf,1,0", "64,1,64", "16,1,16", "4,1,4", "1,1,1"]

    rep = s2u_report(base, args.seconds, Convention.COMPAT)
    conv = sum(v for k, v in rep.components.items() if k.startswith("frontend")) / 1e12
    print(f"conv frontend: {conv:.4f} TFLOPs (both conventions)")
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["layers", "window", "receptive_field", "latency", "tflops_compat", "tflops_full"])
    for n in depths:
        for w in windows:
            window = WindowConfig.parse(w)
            cfg, vocab = profile(args.profile, n_layers=n, window=window)
            compat = s2u_report(cfg, args.seconds, Convention.COMPAT, vocab).tflops_per_minute
            full = s2u_report(cfg, args.seconds, Convention.FULL, vocab).tflops_per_minute
            rf = (window.left + window.right) * n + 1
            lat = window.right * n + 1
            out.writerow([n, window, rf, lat, f"{compat:.4f}", f"{full:.4f}"])


if __name__ == "__main__":
    main()
