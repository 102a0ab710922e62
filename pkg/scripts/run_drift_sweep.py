#!/usr/bin/env python3
"""Drift/advantage curves for one model across a sweep of chunk sizes.

Runs the three-condition evaluation (full attention, isolated chunks,
carried kv-fold cache) on a seeded synthetic model and writes one output
directory per chunk size under --out.

    python3 scripts/run_drift_sweep.py --out results/drift
"""

import argparse
import sys

from kvcarry.cli import main as kvcarry_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/drift")
    parser.add_argument("--T", type=int, default=2048)
    parser.add_argument("--chunk-sizes", default="32,64,128,256,512")
    parser.add_argument("--windows", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--precision", choices=["f32", "f64", "bf16"], default="f32")
    parser.add_argument("--jobs", type=int, default=2)
    args = parser.parse_args(argv)

    for C in (int(c) for c in args.chunk_sizes.split(",")):
        print(f"\n=== chunk size C={C} ===")
        rc = kvcarry_main(
            [
                "drift", "--synthetic",
                "--layers", "4", "--heads", "8", "--kv-heads", "2",
                "--d-model", "256", "--d-ff", "512", "--vocab", "512",
                "--T", str(args.T), "--C", str(C),
                "--windows", str(args.windows), "--seed", str(args.seed),
                "--precision", args.precision, "--jobs", str(args.jobs),
                "--out", f"{args.out}/C{C}",
            ]
        )
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
