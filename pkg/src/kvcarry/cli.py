"""Command-line front end.

Subcommands: drift, needle, multi-needle, stream-compare, accounting.
Every output file starts with a header object carrying the full config and
seeds, so a run can be reproduced byte-identically in deterministic mode.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .cache import (
    AttentionPrune,
    CachePolicy,
    FoldAccumulate,
    QuantRoundTrip,
    SinkWindow,
    UniformDecay,
)
from .fold import eval_three_conditions, synthetic_corpus
from .kernels import Precision
from .metrics import (
    GB,
    attention_scores_bytes,
    drift_advantage,
    kv_bytes_per_token,
    plateau_stats,
)
from .model import ModelConfig, random_weights
from .needle import build_trial, run_trial
from .weights_io import load_weights


class ConfigError(ValueError):
    pass


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", help="KVFW weight file; omit for a synthetic model")
    p.add_argument("--synthetic", action="store_true", help="use seeded random weights")
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--kv-heads", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--vocab", type=int, default=256)
    p.add_argument("--max-position", type=int, default=262144)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--precision", choices=["f32", "f64", "bf16"], default="f32")


def _add_policy_args(p: argparse.ArgumentParser) -> None:
    p.add_argument(
        "--policy",
        choices=["fold", "sink-window", "quant", "decay", "prune"],
        default="fold",
    )
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=1020)
    p.add_argument("--bits", type=int, default=8, choices=[4, 8])
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--keep", type=int, default=1024)


def _policy_from_args(args) -> CachePolicy:
    if args.policy == "fold":
        return FoldAccumulate()
    if args.policy == "sink-window":
        return SinkWindow(n_sinks=args.sinks, window=args.window)
    if args.policy == "quant":
        return QuantRoundTrip(bits=args.bits)
    if args.policy == "decay":
        return UniformDecay(gamma=args.gamma)
    return AttentionPrune(keep=args.keep)


def _model_from_args(args) -> tuple[ModelConfig, object]:
    precision = Precision(args.precision)
    if args.model:
        try:
            config, weights = load_weights(args.model, dtype=precision.dtype)
        except OSError as e:
            raise ConfigError(f"cannot read model file: {e}") from e
        return config, weights
    if not args.synthetic:
        raise ConfigError("provide --model PATH or --synthetic")
    if args.d_model % args.heads != 0:
        raise ConfigError("--d-model must be divisible by --heads")
    config = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        d_model=args.d_model,
        d_head=args.d_model // args.heads,
        d_ff=args.d_ff,
        vocab_size=args.vocab,
        max_position=args.max_position,
    )
    return config, random_weights(config, args.model_seed, precision)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("KVCARRY_OUT", ".")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header(args, seeds: list[int]) -> dict:
    # "out" is where the artifact lands, not part of the experiment, so two
    # runs into different directories can still be byte-identical
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "out")}
    return {
        "type": "header",
        "artifact_version": __version__,
        "seeds": seeds,
        "config": config,
    }


def _write_jsonl(path: Path, header: dict, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_drift(args) -> int:
    config, weights = _model_from_args(args)
    precision = Precision(args.precision)
    if args.T > config.max_position:
        raise ConfigError(f"T={args.T} exceeds max_position={config.max_position}")
    if args.C > args.T:
        raise ConfigError("C must be <= T")
    seeds = [args.seed + i for i in range(args.windows)]
    corpus = None
    if args.tokens:
        try:
            corpus = np.load(args.tokens)
        except OSError as e:
            raise ConfigError(f"cannot read token file: {e}") from e
        if corpus.ndim != 1:
            raise ConfigError("token file must hold a 1-D int array")
        if len(corpus) < args.T * args.windows:
            raise ConfigError(
                f"token file has {len(corpus)} tokens, "
                f"need T*windows = {args.T * args.windows}"
            )

    def one_window(i: int):
        if corpus is None:
            tokens = synthetic_corpus(args.T, config.vocab_size, seeds[i])
        else:
            tokens = corpus[i * args.T : (i + 1) * args.T]
        return eval_three_conditions(
            config, weights, tokens, args.C, precision, window_id=f"w{i}"
        )

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        all_records = [r for recs in pool.map(one_window, range(args.windows)) for r in recs]

    curve = drift_advantage(all_records)
    out = _out_dir(args)
    _write_jsonl(out / "records.jsonl", _header(args, seeds), [r.to_dict() for r in all_records])
    with open(out / "curve.json", "w") as f:
        json.dump({"header": _header(args, seeds), "curve": curve.to_dict()}, f, indent=2)
    with open(out / "curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["depth", "drift", "advantage"])
        for d, dr, adv in zip(curve.depths, curve.drift, curve.advantage):
            w.writerow([d, dr, adv])

    print(f"depths: {len(curve.depths)}  windows: {curve.n_windows}")
    print(f"max |drift|: {max(abs(v) for v in curve.drift):.3e} nats")
    if any(d >= 7 for d in curve.depths):
        stats = plateau_stats(curve, d_min=7)
        print(
            f"plateau (d>=7): mean {stats['plateau_mean']:.3e}, "
            f"span {stats['plateau_span']:.3e} nats"
        )
    print(f"wrote {out / 'records.jsonl'}, {out / 'curve.json'}, {out / 'curve.csv'}")
    return 0


def _needle_rows(args, config, weights, precision, policy, seeds, k=None) -> list[dict]:
    distances = (
        [int(d) for d in str(args.distances).split(",")] if k is None else [None]
    )

    def one(job) -> dict:
        seed, dist = job
        trial = build_trial(args.T, args.C, seed, distance=dist, k=k)
        outcomes = run_trial(
            config, weights, trial, policy, precision,
            max_new=args.max_new, decode=not args.no_decode,
        )
        return {"seed": seed, "trial": trial, "outcomes": outcomes}

    jobs = [(seed, dist) for dist in distances for seed in seeds]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one, jobs))

    rows = []
    for i, res in enumerate(results):
        for outcome in res["outcomes"]:
            rows.append(
                {
                    "trial_id": i,
                    "T": args.T,
                    "C": args.C,
                    "K": len(res["trial"].specs),
                    "distance": outcome["distance"],
                    "policy": policy.name,
                    "resident": outcome["resident"],
                    "reachable": outcome["reachable"],
                    "decoded": outcome["decoded"],
                    "exact_match": outcome["exact_match"],
                    "seed": res["seed"],
                    "key": outcome["key"],
                    "gold": outcome["gold"],
                }
            )
    return rows


def _print_grid(rows: list[dict]) -> None:
    by_dist: dict[int, list[dict]] = {}
    for r in rows:
        by_dist.setdefault(r["distance"], []).append(r)
    print(f"{'distance':>9} {'resident':>9} {'exact':>9}")
    for dist in sorted(by_dist):
        cells = by_dist[dist]
        res = sum(c["resident"] for c in cells)
        hit = sum(c["exact_match"] for c in cells)
        print(f"{dist:>9} {res:>4}/{len(cells):<4} {hit:>4}/{len(cells):<4}")


def cmd_needle(args, k=None) -> int:
    config, weights = _model_from_args(args)
    precision = Precision(args.precision)
    policy = _policy_from_args(args)
    seeds = [args.seed + i for i in range(args.trials)]
    rows = _needle_rows(args, config, weights, precision, policy, seeds, k=k)
    out = _out_dir(args)
    name = "multi_needle.jsonl" if k else "needle.jsonl"
    _write_jsonl(out / name, _header(args, seeds), rows)
    _print_grid(rows)
    print(f"wrote {out / name}")
    return 0


def cmd_multi_needle(args) -> int:
    return cmd_needle(args, k=args.K)


def cmd_stream_compare(args) -> int:
    config, weights = _model_from_args(args)
    precision = Precision(args.precision)
    seeds = [args.seed + i for i in range(args.trials)]
    sink = SinkWindow(n_sinks=args.sinks, window=args.window)
    all_rows = []
    print(f"stream-compare: T={args.T} C={args.C} distances={args.distances}")
    for policy in (FoldAccumulate(), sink):
        rows = _needle_rows(args, config, weights, precision, policy, seeds)
        all_rows.extend(rows)
        print(f"\npolicy: {policy.name}")
        _print_grid(rows)
    out = _out_dir(args)
    _write_jsonl(out / "stream_compare.jsonl", _header(args, seeds), all_rows)
    print(f"\nwrote {out / 'stream_compare.jsonl'}")
    return 0


def cmd_accounting(args) -> int:
    config = ModelConfig(
        n_layers=args.layers,
        n_heads=args.heads,
        n_kv_heads=args.kv_heads,
        d_model=args.heads * args.d_head,
        d_head=args.d_head,
        d_ff=1,
        vocab_size=2,
        max_position=max(args.T, 1),
    )
    per_token = kv_bytes_per_token(config, args.bytes)
    total = per_token * args.T
    full_scores = attention_scores_bytes(args.heads, args.T, args.T, args.bytes)
    chunk_scores = attention_scores_bytes(args.heads, args.C, args.T, args.bytes)
    table = {
        "kv_bytes_per_token": per_token,
        "kv_cache_total_bytes": total,
        "kv_cache_total_gb": total / GB,
        "full_attention_scores_bytes": full_scores,
        "chunked_attention_scores_bytes": chunk_scores,
    }
    print(f"KV cache: {per_token} B/token, {total / GB:.2f} GB at T={args.T}")
    print(f"attention scores [H,T,T]: {full_scores / GB:.1f} GB (full forward)")
    print(f"attention scores [H,C,T]: {chunk_scores / GB:.2f} GB (per chunk)")
    out = _out_dir(args)
    with open(out / "accounting.json", "w") as f:
        json.dump({"header": _header(args, []), "table": table}, f, indent=2)
    print(f"wrote {out / 'accounting.json'}")
    return 0


def _apply_config_file(argv: list[str]) -> list[str]:
    """A `--config file` of flat `key = value` lines supplies defaults;
    explicit flags override it."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise ConfigError("--config requires a file path") from None
    prepend = []
    try:
        with open(path) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"bad config line: {line!r}")
                key, value = (s.strip() for s in line.split("=", 1))
                flag = "--" + key.replace("_", "-")
                if value.lower() in ("true", "false"):
                    if value.lower() == "true":
                        prepend.append(flag)
                else:
                    prepend.extend([flag, value])
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}") from e
    rest = argv[:i] + argv[i + 2 :]
    # config values go first so later explicit flags win
    return [rest[0]] + prepend + rest[1:] if rest else prepend


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvcarry",
        description="Chunked KV-cache transformer inference experiments",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("drift", help="three-condition NLL drift/advantage curves")
    _add_model_args(p)
    p.add_argument("--tokens", help=".npy int64 token file; omit for synthetic text")
    p.add_argument("--T", type=int, default=2048)
    p.add_argument("--C", type=int, default=256)
    p.add_argument("--windows", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--config", help="flat key=value config file")
    p.set_defaults(func=cmd_drift)

    for name, fn in (("needle", cmd_needle), ("multi-needle", cmd_multi_needle)):
        p = sub.add_parser(name, help=f"{name} retrieval trials")
        _add_model_args(p)
        _add_policy_args(p)
        p.add_argument("--T", type=int, default=8192)
        p.add_argument("--C", type=int, default=64)
        if name == "needle":
            p.add_argument("--distances", default="1,31")
        else:
            p.add_argument("--K", type=int, default=4)
        p.add_argument("--trials", type=int, default=3)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--max-new", type=int, default=30)
        p.add_argument("--no-decode", action="store_true")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--out", default=None)
        p.add_argument("--config", help="flat key=value config file")
        p.set_defaults(func=fn)

    p = sub.add_parser("stream-compare", help="fold vs sink-window retrieval grid")
    _add_model_args(p)
    p.add_argument("--sinks", type=int, default=4)
    p.add_argument("--window", type=int, default=252)
    p.add_argument("--T", type=int, default=8192)
    p.add_argument("--C", type=int, default=64)
    p.add_argument("--distances", default="1,31,63,127")
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-new", type=int, default=30)
    p.add_argument("--no-decode", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.add_argument("--config", help="flat key=value config file")
    p.set_defaults(func=cmd_stream_compare)

    p = sub.add_parser("accounting", help="analytical KV memory model")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--kv-heads", type=int, required=True)
    p.add_argument("--d-head", type=int, required=True)
    p.add_argument("--bytes", type=int, default=2)
    p.add_argument("--heads", type=int, default=32)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--C", type=int, default=256)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_accounting)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as e:
            return 0 if e.code == 0 else 1
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
