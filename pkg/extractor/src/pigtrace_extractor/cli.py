"""Command line entry point.

One subject: extract traces from a checkpoint.  Exit codes: 0 success,
1 for bad usage, malformed prompt files, or extraction failures, 2 for
internal failures.  Set PIGTRACE_LOG=debug|info|warning|error to
control log verbosity.

The prompt file is JSONL; each line is
    {"prompt": "...", "span": [lo, hi], "candidates": ["...", ...]}
where span (character offsets) falls back to --span and candidates are
optional (their absence selects greedy generation).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from .errors import ExtractorError, UsageError
from .extract import extract, resolve_layers, write_manifest
from .jobs import DEFAULT_LAYERS, ExtractionJob
from .runtime import CheckpointRuntime

log = logging.getLogger("pigtrace_extractor.cli")


def _parse_span(text: str) -> tuple[int, int]:
    for sep in (":", ","):
        if sep in text:
            parts = text.split(sep)
            if len(parts) == 2:
                try:
                    return int(parts[0]), int(parts[1])
                except ValueError:
                    break
    raise UsageError(f"bad --span {text!r}: expected LO:HI character offsets")


def _load_prompt_file(path: Path, default_span: tuple[int, int] | None) -> list[dict]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read prompt file {path}: {exc}") from None
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path.name} line {lineno}: bad JSON ({exc})") from None
        if not isinstance(obj, dict) or not isinstance(obj.get("prompt"), str):
            raise UsageError(f"{path.name} line {lineno}: expected an object with a 'prompt' string")
        span = obj.get("span", default_span)
        if span is None:
            raise UsageError(
                f"{path.name} line {lineno}: no 'span' field and no --span fallback"
            )
        if not (isinstance(span, (list, tuple)) and len(span) == 2):
            raise UsageError(f"{path.name} line {lineno}: 'span' must be [lo, hi]")
        candidates = obj.get("candidates", [])
        if not isinstance(candidates, list) or not all(isinstance(c, str) for c in candidates):
            raise UsageError(f"{path.name} line {lineno}: 'candidates' must be a list of strings")
        records.append({
            "prompt": obj["prompt"],
            "span": (int(span[0]), int(span[1])),
            "candidates": tuple(candidates),
        })
    if not records:
        raise UsageError(f"no prompts in {path}")
    return records


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pigtrace-extract",
        description="Run a checkpoint and emit .pigtrace step-trace files",
    )
    parser.add_argument("--model", required=True, help="checkpoint identifier or path")
    parser.add_argument("--prompt-file", required=True, type=Path,
                        help="JSONL of {prompt, span?, candidates?} records")
    parser.add_argument("--span", default=None,
                        help="LO:HI character offsets used when a record has no span")
    parser.add_argument("--layers", default=DEFAULT_LAYERS,
                        help="candidate layer selector: 'last16', 'last8:even', or '3,5,7'")
    parser.add_argument("--max-new-tokens", type=int, default=16,
                        help="greedy steps for records without candidates")
    parser.add_argument("--out", required=True, type=Path, help="output directory")
    parser.add_argument("--device", default="cpu")
    return parser


def _cmd_extract(args) -> int:
    default_span = _parse_span(args.span) if args.span else None
    records = _load_prompt_file(args.prompt_file, default_span)
    layers_arg = args.layers
    if isinstance(layers_arg, str) and not layers_arg.startswith("last"):
        try:
            layers_arg = tuple(int(part) for part in layers_arg.split(","))
        except ValueError:
            raise UsageError(f"bad --layers {args.layers!r}") from None

    runtime = CheckpointRuntime(args.model, device=args.device)
    layers = resolve_layers(layers_arg, runtime.num_layers)
    emitted = []
    for index, record in enumerate(records):
        job = ExtractionJob(
            model_id=args.model,
            prompt=record["prompt"],
            span_chars=record["span"],
            candidates=record["candidates"],
            layers=layers_arg,
            max_new_tokens=args.max_new_tokens,
            out_dir=args.out,
            prompt_index=index,
        )
        emitted.extend(extract(job, runtime))
    manifest = write_manifest(args.out, runtime, emitted, layers)
    print(
        f"wrote {len(emitted)} trace(s) for {len(records)} prompt(s) to {args.out} "
        f"(manifest {manifest.name})",
        file=sys.stderr,
    )
    return 0


def _setup_logging() -> None:
    level_name = os.environ.get("PIGTRACE_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str]) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        return _cmd_extract(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ExtractorError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
