#!/usr/bin/env python3
"""Needle-retrieval grid: full fold cache vs sink-plus-window eviction.

Folds a long synthetic document chunk by chunk, plants one needle sentence
at each distance from the question, and reports whether the needle's KV
rows are still resident when the question is asked.

    python3 scripts/run_stream_compare.py --out results/stream
"""

import argparse
import sys

from kvcarry.cli import main as kvcarry_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/stream")
    parser.add_argument("--T", type=int, default=8192)
    parser.add_argument("--C", type=int, default=64)
    parser.add_argument("--sinks", type=int, default=4)
    parser.add_argument("--window", type=int, default=252)
    parser.add_argument("--distances", default="1,31,63,127")
    parser.add_argument("--trials", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--decode", action="store_true",
                        help="also greedy-decode an answer (slower)")
    args = parser.parse_args(argv)

    argv_out = [
        "stream-compare", "--synthetic",
        "--layers", "1", "--heads", "2", "--kv-heads", "1",
        "--d-model", "16", "--d-ff", "32", "--vocab", "256",
        "--T", str(args.T), "--C", str(args.C),
        "--sinks", str(args.sinks), "--window", str(args.window),
        "--distances", args.distances, "--trials", str(args.trials),
        "--seed", str(args.seed), "--jobs", "2", "--out", args.out,
    ]
    if not args.decode:
        argv_out.append("--no-decode")
    return kvcarry_main(argv_out)


if __name__ == "__main__":
    sys.exit(run())
