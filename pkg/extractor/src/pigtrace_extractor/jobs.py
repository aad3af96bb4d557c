"""Extraction job description and character-to-token span mapping."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import SpanMappingError

DEFAULT_LAYERS = "last16"


@dataclass(frozen=True)
class ExtractionJob:
    """One prompt to run through a checkpoint.

    With candidates the job is teacher-forced scoring (one trace per
    candidate); without them it is greedy generation of up to
    max_new_tokens steps (one trace).  span_chars is a half-open
    character range into prompt selecting the source-document span the
    decoder may point into; it must cover at least one token under the
    checkpoint's tokenizer.
    """

    model_id: str
    prompt: str
    span_chars: tuple[int, int]
    candidates: tuple[str, ...] = ()
    layers: str | tuple[int, ...] = DEFAULT_LAYERS
    max_new_tokens: int = 16
    out_dir: str | Path = "."
    prompt_index: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.prompt:
            raise SpanMappingError("prompt is empty")
        lo, hi = self.span_chars
        if not (isinstance(lo, int) and isinstance(hi, int)):
            raise SpanMappingError(f"span offsets must be integers, got {self.span_chars!r}")
        if not (0 <= lo < hi <= len(self.prompt)):
            raise SpanMappingError(
                f"character span [{lo}, {hi}) is not a valid range into a "
                f"{len(self.prompt)}-character prompt",
                span_chars=(lo, hi),
            )
        for k, candidate in enumerate(self.candidates):
            if not isinstance(candidate, str) or not candidate.strip():
                raise SpanMappingError(f"candidate {k} is empty")
        if self.max_new_tokens < 1:
            raise SpanMappingError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.prompt_index < 0:
            raise SpanMappingError(f"prompt_index must be >= 0, got {self.prompt_index}")


def map_char_span(
    offsets: Sequence[tuple[int, int]], span_chars: tuple[int, int], prompt: str
) -> tuple[int, int]:
    """Map a half-open character range to the half-open token range it covers.

    A token is covered when its character extent overlaps the span.
    Raises SpanMappingError with character and token diagnostics when
    nothing is covered (e.g. the span falls entirely inside whitespace)
    or when the covered tokens are not contiguous.
    """
    lo, hi = span_chars
    covered = [
        i for i, (a, b) in enumerate(offsets) if b > lo and a < hi and b > a
    ]
    if not covered:
        nearby = ", ".join(
            f"token {i} at [{a}, {b})" for i, (a, b) in enumerate(offsets) if b > a
        )
        raise SpanMappingError(
            f"character span [{lo}, {hi}) ({prompt[lo:hi]!r}) covers no tokens; "
            f"token boundaries: {nearby or 'none'}",
            span_chars=(lo, hi),
        )
    if covered != list(range(covered[0], covered[-1] + 1)):
        raise SpanMappingError(
            f"character span [{lo}, {hi}) maps to non-contiguous tokens {covered}",
            span_chars=(lo, hi),
        )
    return covered[0], covered[-1] + 1
