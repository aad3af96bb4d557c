"""Run extraction jobs and emit .pigtrace files plus a manifest.

Emitted files follow the step-trace codec: the header records the
prompt token ids, the captured layer set, the anchor (last) layer, the
attention source layer, and the token span mapped from the job's
character span.  Scoring jobs emit one trace per candidate with the
candidate's ids as forced tokens; generation jobs emit a single trace
of the runtime's greedy walk, with each chosen token recorded as the
step's forced id so the same file also replays under teacher forcing.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from pig import SourceSpan, TraceHeader, TraceStep, expand_layer_selector, write_trace_file

from .errors import ExtractionError
from .jobs import ExtractionJob, map_char_span
from .runtime import CheckpointRuntime, StepCapture

log = logging.getLogger("pigtrace_extractor.extract")

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class ExtractedFile:
    """One emitted trace and the record that produced it."""

    path: Path
    prompt: str
    candidate: str | None
    prompt_index: int
    candidate_index: int | None
    tokens: tuple[int, ...]
    span_chars: tuple[int, int]
    span_tokens: tuple[int, int]

    def manifest_record(self) -> dict:
        return {
            "prompt": self.prompt,
            "candidate": self.candidate,
            "file": self.path.name,
            "prompt_index": self.prompt_index,
            "candidate_index": self.candidate_index,
            "tokens": list(self.tokens),
            "span_chars": list(self.span_chars),
            "span_tokens": list(self.span_tokens),
        }


def resolve_layers(selector, num_layers: int) -> tuple[int, ...]:
    """Captured layer set: the anchor plus the selected candidate layers."""
    candidates = expand_layer_selector(selector, num_layers)
    return tuple(sorted(set(candidates) | {num_layers}))


def extract(job: ExtractionJob, runtime: CheckpointRuntime | None = None) -> list[ExtractedFile]:
    """Run one job; returns the emitted files in candidate order.

    A write failure removes the partial file before re-raising, so the
    output directory never holds a truncated trace.
    """
    runtime = runtime if runtime is not None else CheckpointRuntime(job.model_id)
    prompt_ids, offsets = runtime.encode_with_offsets(job.prompt)
    if not prompt_ids:
        raise ExtractionError(f"prompt {job.prompt!r} tokenizes to no tokens")
    span_tokens = map_char_span(offsets, job.span_chars, job.prompt)
    layers = resolve_layers(job.layers, runtime.num_layers)

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    emitted: list[ExtractedFile] = []

    if job.candidates:
        for k, candidate in enumerate(job.candidates):
            forced = runtime.encode(candidate)
            if not forced:
                raise ExtractionError(f"candidate {k} ({candidate!r}) tokenizes to no tokens")
            captures = runtime.capture_steps(prompt_ids, layers, forced=forced)
            path = out_dir / f"p{job.prompt_index:04d}-c{k:02d}.pigtrace"
            _emit(runtime, job, path, prompt_ids, span_tokens, layers, captures, forced)
            emitted.append(ExtractedFile(
                path=path, prompt=job.prompt, candidate=candidate,
                prompt_index=job.prompt_index, candidate_index=k,
                tokens=tuple(forced), span_chars=job.span_chars, span_tokens=span_tokens,
            ))
    else:
        captures = runtime.capture_steps(
            prompt_ids, layers, max_new_tokens=job.max_new_tokens
        )
        generated = [c.next_token for c in captures]
        path = out_dir / f"p{job.prompt_index:04d}-gen.pigtrace"
        _emit(runtime, job, path, prompt_ids, span_tokens, layers, captures, generated)
        emitted.append(ExtractedFile(
            path=path, prompt=job.prompt, candidate=runtime.decode(generated),
            prompt_index=job.prompt_index, candidate_index=None,
            tokens=tuple(generated), span_chars=job.span_chars, span_tokens=span_tokens,
        ))
    log.info("job %d: wrote %d trace(s) to %s", job.prompt_index, len(emitted), out_dir)
    return emitted


def _emit(
    runtime: CheckpointRuntime,
    job: ExtractionJob,
    path: Path,
    prompt_ids: Sequence[int],
    span_tokens: tuple[int, int],
    layers: tuple[int, ...],
    captures: Sequence[StepCapture],
    step_tokens: Sequence[int],
) -> None:
    header = TraceHeader(
        vocab_size=runtime.vocab_size,
        layers=layers,
        anchor=runtime.num_layers,
        attn_layer=runtime.num_layers,
        prompt=tuple(int(t) for t in prompt_ids),
        span=SourceSpan(*span_tokens),
        meta={
            "source": "extractor",
            "model": runtime.model_id,
            "mode": "scored" if job.candidates else "generated",
            "prompt_index": job.prompt_index,
            **dict(job.meta),
        },
    )
    steps = [
        TraceStep(
            pos=i,
            layer_logits=capture.layer_logits,
            attention=capture.attention,
            forced=int(step_tokens[i]),
        )
        for i, capture in enumerate(captures)
    ]
    try:
        write_trace_file(path, header, steps)
    except Exception as exc:
        path.unlink(missing_ok=True)
        raise ExtractionError(f"failed writing {path} ({exc}); partial file removed") from exc


def write_manifest(
    out_dir, runtime: CheckpointRuntime, files: Sequence[ExtractedFile], layers: tuple[int, ...]
) -> Path:
    """Write manifest.json of (prompt, candidate, file) records for eval."""
    payload = {
        "model": runtime.model_id,
        "vocab_size": runtime.vocab_size,
        "layers": list(layers),
        "anchor": runtime.num_layers,
        "attn_layer": runtime.num_layers,
        "inference_mode": {
            "dropout": "disabled",
            "autograd": "disabled",
            "attention_implementation": "eager",
        },
        "records": [f.manifest_record() for f in files],
    }
    path = Path(out_dir) / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path
