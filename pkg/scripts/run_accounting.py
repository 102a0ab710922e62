#!/usr/bin/env python3
"""Analytical KV-cache memory table for a 32-layer GQA configuration.

Prints bytes per cached token, the total cache size at a 131,072-token
context, and the attention-score buffer contrast between one full-context
forward and a chunked forward.

    python3 scripts/run_accounting.py --out results/accounting
"""

import argparse
import sys

from kvcarry.cli import main as kvcarry_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="results/accounting")
    parser.add_argument("--T", type=int, default=131072)
    parser.add_argument("--C", type=int, default=256)
    args = parser.parse_args(argv)

    return kvcarry_main(
        [
            "accounting",
            "--layers", "32", "--heads", "32", "--kv-heads", "8",
            "--d-head", "128", "--bytes", "2",
            "--T", str(args.T), "--C", str(args.C),
            "--out", args.out,
        ]
    )


if __name__ == "__main__":
    sys.exit(run())
