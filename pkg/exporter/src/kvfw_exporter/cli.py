"""Command-line entry point: kvfw-export."""

from __future__ import annotations

import argparse
import sys

from .export import export
from .format import ExportError
from .tokens import encode_to_file


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvfw-export",
        description="Export a Llama/Qwen-family checkpoint to KVFW",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("weights", help="convert a checkpoint directory to KVFW")
    p.add_argument("source", help="local checkpoint directory")
    p.add_argument("output", help="output .kvfw path")

    p = sub.add_parser("encode", help="tokenize a text file into a .npy token file")
    p.add_argument("source", help="local checkpoint directory (for its tokenizer)")
    p.add_argument("text_file", help="UTF-8 text file to encode")
    p.add_argument("output", help="output .npy path")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "weights":
            manifest = export(args.source, args.output)
            print(f"wrote {args.output} ({len(manifest.checksums)} tensors)")
        else:
            with open(args.text_file, encoding="utf-8") as f:
                n = encode_to_file(args.source, f.read(), args.output)
            print(f"wrote {args.output} ({n} tokens)")
        return 0
    except ExportError as e:
        print(f"export error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
