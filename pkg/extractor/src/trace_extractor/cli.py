"""Command-line wrapper; flags mirror ExtractorConfig fields."""
from __future__ import annotations

import argparse
import sys

from .extractor import ExtractorConfig, ExtractorError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moe-trace-extract",
        description="Extract an expert-routing trace from an MoE checkpoint by "
        "hooking its router gates during greedy inference.",
    )
    parser.add_argument("--model", required=True, help="model identifier or local path")
    parser.add_argument(
        "--dataset",
        required=True,
        help="prompt source: a text file (one prompt per line, optionally "
        "'file:<path>') or 'hf:<name>[:<config>]'",
    )
    parser.add_argument("--split", default="validation", help="dataset split for hf: sources")
    parser.add_argument("--text-field", help="dataset column holding the prompt text")
    parser.add_argument("--max-seqs", type=int, default=512)
    parser.add_argument("--max-prompt-tokens", type=int, default=512)
    parser.add_argument("--decode-tokens", type=int, default=64)
    parser.add_argument("--output", default="trace.jsonl")
    parser.add_argument("--device", default="auto", help="cpu, cuda, or auto")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = ExtractorConfig(
        model=args.model,
        dataset=args.dataset,
        split=args.split,
        text_field=args.text_field,
        max_seqs=args.max_seqs,
        max_prompt_tokens=args.max_prompt_tokens,
        decode_tokens=args.decode_tokens,
        output=args.output,
        device=args.device,
    )
    try:
        path = extract(config)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
