"""Trace extractor: runs a transformer checkpoint and emits .pigtrace files.

The adapter between real model runtimes and the trace-driven decoding
engine: it hooks per-layer hidden states, applies the model's own
output head to them (early exit), head-averages the last attention
module's weights, and serializes everything in the engine's trace
format — for both greedy generation and teacher-forced candidate
scoring.
"""

from .errors import ExtractionError, ExtractorError, SpanMappingError, UsageError
from .extract import MANIFEST_NAME, ExtractedFile, extract, resolve_layers, write_manifest
from .jobs import DEFAULT_LAYERS, ExtractionJob, map_char_span
from .runtime import CheckpointRuntime, StepCapture

__all__ = [
    "DEFAULT_LAYERS",
    "MANIFEST_NAME",
    "CheckpointRuntime",
    "ExtractedFile",
    "ExtractionError",
    "ExtractionJob",
    "ExtractorError",
    "SpanMappingError",
    "StepCapture",
    "UsageError",
    "extract",
    "map_char_span",
    "resolve_layers",
    "write_manifest",
]
