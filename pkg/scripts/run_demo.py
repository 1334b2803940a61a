#!/usr/bin/env python3
"""End-to-end demo: train a small MLP on synthetic blobs, convert it to a
spiking net, search burst caps and compression ratios, fit the early-exit
gate, and print the final evaluation + ablation tables.

Everything goes through the same CLI entry points a user would call, one
stage at a time, against a single JSON config written into the output
directory. Re-running with the same seed reproduces every artifact byte for
byte.

    python3 scripts/run_demo.py --out /tmp/snn-demo --seed 7
"""

import argparse
import json
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from spikecal import cli

STAGES = [
    "train",
    "convert",
    "search-phi",
    "search-rho",
    "fit-exit",
    "eval",
    "ablate",
    "report",
]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_out", help="artifact directory")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--timesteps", type=int, default=4, help="inference horizon T")
    ap.add_argument("--t-max", type=int, default=8, help="early-exit horizon")
    ap.add_argument("--train-n", type=int, default=2000)
    ap.add_argument("--eval-n", type=int, default=1000)
    ap.add_argument("--dim", type=int, default=784)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=10)
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    config = {
        "out_dir": args.out,
        "seed": args.seed,
        "timesteps": args.timesteps,
        "t_max": args.t_max,
        "calib_samples": 256,
        "dataset": {
            "kind": "blobs",
            "n": args.train_n,
            "eval_n": args.eval_n,
            "dim": [args.dim],
            "classes": args.classes,
        },
        "model": {"hidden": [256, 128]},
        "train": {"epochs": args.epochs, "lr": 0.05},
    }
    cfg_path = os.path.join(args.out, "demo_config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh, indent=2)

    for stage in STAGES:
        print(f"== {stage} ==")
        rc = cli.main([stage, "--config", cfg_path])
        if rc != 0:
            print(f"stage {stage} failed with exit code {rc}", file=sys.stderr)
            return rc

    print("\nartifacts:")
    for root, _, files in os.walk(args.out):
        for name in sorted(files):
            rel = os.path.relpath(os.path.join(root, name), args.out)
            size = os.path.getsize(os.path.join(root, name))
            print(f"  {rel:32s} {size:>8d} bytes")

    for table in ("eval.csv", "ablation.csv"):
        print(f"\n{table}:")
        with open(os.path.join(args.out, table)) as fh:
            for line in fh.read().splitlines():
                print("  " + line)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
