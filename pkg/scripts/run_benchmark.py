"""Run the bundled benchmark end to end and print the trend checks.

    python scripts/run_benchmark.py [--config configs/benchmark.yaml] [--out runs/benchmark]
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from uncprop import cli

REPO = Path(__file__).resolve().parents[1]


def monotone(xs, increasing=True):
    pairs = list(zip(xs, xs[1:]))
    return all(a < b for a, b in pairs) if increasing else all(a > b for a, b in pairs)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(REPO / "configs" / "benchmark.yaml"))
    p.add_argument("--out", default=str(REPO / "runs" / "benchmark"))
    p.add_argument("--threads", default="1")
    args = p.parse_args()

    t0 = time.perf_counter()
    for cmd in ("synth", "train-upstream", "train-downstream", "evaluate", "report"):
        extra = ["--threads", args.threads] if cmd == "evaluate" else []
        code = cli.run([cmd, "--config", args.config, "--out", args.out, *extra])
        if code:
            sys.exit(code)
    elapsed = time.perf_counter() - t0

    with open(Path(args.out) / "sweep_report.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    ok = True
    for task, key in (("classification", "mutual_info"), ("regression", "sqrt_var_prop")):
        tr = sorted((r for r in rows if r["task"] == task), key=lambda r: float(r["accel"]))
        checks = {
            "sqrt_mean_var_x increasing": monotone([float(r["sqrt_mean_var_x"]) for r in tr]),
            "ssim decreasing": monotone([float(r["ssim"]) for r in tr], increasing=False),
            f"{key} increasing": monotone([float(r[key]) for r in tr]),
        }
        for name, passed in checks.items():
            print(f"{task:15s} {name:30s} {'ok' if passed else 'FAILED'}")
            ok &= passed
    print(f"total wall time {elapsed:.1f} s")
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
