"""Pointer-generator decoding over per-layer logit traces.

The engine mixes a pointer distribution (normalized attention over a
source span, scattered onto token ids) with the model's own next-token
distribution, gated by how strongly early-exit layers disagree with the
final layer.  Backends supply steps either from recorded trace files or
from a seeded synthetic generator, so the decoding math is testable
without any model runtime.
"""

from .backend import (
    BackendSession,
    SyntheticSession,
    SyntheticSpec,
    TraceHeader,
    TraceSession,
    TraceStep,
    attach_forced,
    decode_trace,
    encode_trace,
    read_trace_file,
    synth_trace,
    write_trace_file,
)
from .decoder import GenerationResult, SamplingParams, StepScore, generate, score_sequence, score_steps
from .engine import (
    AGGREGATORS,
    PigConfig,
    SourceSpan,
    StepDiagnostics,
    StepTrace,
    aggregate_heads,
    copy_probability,
    decode_step,
    expand_layer_selector,
    mix_distributions,
    pointer_distribution,
)
from .errors import (
    DatasetError,
    DegenerateSpan,
    DivergenceUndefined,
    EndOfTrace,
    InvalidArgument,
    PigError,
    SchemaError,
    SequenceError,
    UnsupportedVersion,
    UsageError,
)
from .evals import (
    BenchReport,
    FactorItem,
    McItem,
    McResult,
    McScores,
    QaItem,
    bench_step,
    factor_accuracy,
    factor_from_scores,
    mc_from_scores,
    mc_metrics,
    normalize_answer,
    qa_f1_report,
    squad_f1,
)
from .probcore import jsd, kl_divergence, log_softmax, normalize_span, softmax

__version__ = "0.1.0"

__all__ = [
    "AGGREGATORS",
    "BackendSession",
    "BenchReport",
    "DatasetError",
    "DegenerateSpan",
    "DivergenceUndefined",
    "EndOfTrace",
    "FactorItem",
    "GenerationResult",
    "InvalidArgument",
    "McItem",
    "McResult",
    "McScores",
    "PigConfig",
    "PigError",
    "QaItem",
    "SamplingParams",
    "SchemaError",
    "SequenceError",
    "SourceSpan",
    "StepDiagnostics",
    "StepScore",
    "StepTrace",
    "SyntheticSession",
    "SyntheticSpec",
    "TraceHeader",
    "TraceSession",
    "TraceStep",
    "UnsupportedVersion",
    "UsageError",
    "aggregate_heads",
    "attach_forced",
    "bench_step",
    "copy_probability",
    "decode_step",
    "decode_trace",
    "encode_trace",
    "expand_layer_selector",
    "factor_accuracy",
    "factor_from_scores",
    "generate",
    "jsd",
    "kl_divergence",
    "log_softmax",
    "mc_from_scores",
    "mc_metrics",
    "mix_distributions",
    "normalize_answer",
    "normalize_span",
    "pointer_distribution",
    "qa_f1_report",
    "read_trace_file",
    "score_sequence",
    "score_steps",
    "softmax",
    "squad_f1",
    "synth_trace",
    "write_trace_file",
]
