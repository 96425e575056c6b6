"""CLI: `shim <code_path> --workdir <dir> --timeout-s <n> --mem-bytes <n>`.

The final stdout line is always exactly one JSON result object; exit code 0
whenever that object was emitted.
"""

from __future__ import annotations

import argparse
import json
import sys

from .runner import ShimResult, run_snippet


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shim", description=__doc__)
    parser.add_argument("code_path", help="file containing the snippet to run")
    parser.add_argument("--workdir", required=True, help="working directory for the snippet")
    parser.add_argument("--timeout-s", type=float, default=120.0)
    parser.add_argument("--mem-bytes", type=int, default=2 * 1024**3)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = run_snippet(args.code_path, args.workdir, args.timeout_s, args.mem_bytes)
    except Exception as exc:  # belt and braces: the result line must always appear
        result = ShimResult("", f"[shim] unexpected fault: {exc!r}", "error", 0.0)
    sys.stdout.write(json.dumps(result.to_dict(), ensure_ascii=False) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
