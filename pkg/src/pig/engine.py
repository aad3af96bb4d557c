"""One decoding step of the pointer-generator mixture.

The step takes per-layer next-token logits plus a head-averaged attention
row, turns the attention over a designated source span into a pointer
distribution over the vocabulary, gates it by how much intermediate
layers disagree with the anchor layer, and mixes it with the anchor
softmax:

    output = p_cp * P_source + (1 - p_cp) * P_vocab

with p_cp = min(alpha * agg_j JSD(q_anchor, q_j), clip_max).  Because
p_cp is capped at clip_max <= 1, every vocabulary entry keeps at least
(1 - clip_max) of its anchor probability.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import probcore
from .errors import DegenerateSpan, InvalidArgument

AGGREGATORS = ("mean", "max", "min")

_LAST_K = re.compile(r"^last(\d+)(?::(even|odd))?$")

# Reusable per-thread float64 scratch vectors, keyed by vocabulary size.
# Fresh 256 KB allocations cost more than the arithmetic at large vocab
# sizes, so the step math writes into these instead.
_WORKSPACE = threading.local()
_WS_FIELDS = ("vdist", "anchor", "scratch", "q", "m", "t", "u")


def _buffers(vocab: int) -> dict[str, np.ndarray]:
    spaces = getattr(_WORKSPACE, "spaces", None)
    if spaces is None:
        spaces = {}
        _WORKSPACE.spaces = spaces
    bufs = spaces.get(vocab)
    if bufs is None:
        bufs = {name: np.empty(vocab, dtype=np.float64) for name in _WS_FIELDS}
        spaces[vocab] = bufs
    return bufs


def _softmax_into(logits, temperature: float, scratch: np.ndarray, out: np.ndarray) -> np.ndarray:
    # Same operation sequence as probcore.softmax on a float64 copy, so
    # results are bit-identical; only the storage is preallocated.
    np.copyto(scratch, logits)
    if not np.all(np.isfinite(scratch)):
        raise InvalidArgument("logits must be finite")
    np.divide(scratch, temperature, out=scratch)
    np.subtract(scratch, scratch.max(), out=scratch)
    np.exp(scratch, out=scratch)
    np.divide(scratch, scratch.sum(), out=out)
    return out


def _fresh_jsd(p: np.ndarray, q: np.ndarray, bufs: dict[str, np.ndarray]) -> float:
    # probcore.jsd restricted to freshly softmaxed vectors.  When both
    # are strictly positive this reproduces its arithmetic term for term
    # (same mixture, same ratios, same pairwise sums) without the
    # validation passes and mask copies; exact zeros (exp underflow)
    # fall back to the general masked routine.
    if p.min() <= 0.0 or q.min() <= 0.0:
        return probcore.jsd(p, q)
    m, t, u = bufs["m"], bufs["t"], bufs["u"]
    np.add(p, q, out=m)
    np.multiply(m, 0.5, out=m)
    np.divide(p, m, out=t)
    np.divide(q, m, out=u)
    np.log(t, out=t)
    np.log(u, out=u)
    np.multiply(p, t, out=t)
    np.multiply(q, u, out=u)
    value = 0.5 * float(t.sum()) + 0.5 * float(u.sum())
    return max(value, 0.0)


@dataclass(frozen=True)
class SourceSpan:
    """Half-open token-position interval [start, end) inside the prompt."""

    start: int
    end: int

    def __post_init__(self):
        if not isinstance(self.start, int) or not isinstance(self.end, int):
            raise InvalidArgument("span bounds must be integers")
        if self.start < 0 or self.end <= self.start:
            raise InvalidArgument(
                f"span must satisfy 0 <= start < end, got [{self.start}, {self.end})"
            )

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PigConfig:
    """Step configuration.

    layer_set holds the early-exit layer indices J (anchor excluded);
    attention_layer defaults to the anchor.  temperature only shapes the
    anchor softmax P_vocab; the divergence gate always compares
    temperature-1 distributions so the gate does not move when sampling
    temperature changes.
    """

    anchor_layer: int
    layer_set: tuple[int, ...]
    alpha: float = 500.0
    clip_max: float = 0.5
    aggregator: str = "max"
    attention_layer: int | None = None
    token_filter: frozenset[int] | None = None
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.anchor_layer, int) or self.anchor_layer < 0:
            raise InvalidArgument(f"anchor_layer must be a non-negative int, got {self.anchor_layer!r}")
        layers = tuple(int(j) for j in self.layer_set)
        if not layers:
            raise InvalidArgument("layer_set must be non-empty")
        if len(set(layers)) != len(layers):
            raise InvalidArgument(f"layer_set has duplicate entries: {layers}")
        if any(j < 0 for j in layers):
            raise InvalidArgument(f"layer_set entries must be non-negative: {layers}")
        if self.anchor_layer in layers:
            raise InvalidArgument(f"anchor layer {self.anchor_layer} must not appear in layer_set")
        object.__setattr__(self, "layer_set", tuple(sorted(layers)))
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise InvalidArgument(f"alpha must be finite and >= 0, got {self.alpha!r}")
        if not (0.0 < self.clip_max <= 1.0):
            raise InvalidArgument(f"clip_max must lie in (0, 1], got {self.clip_max!r}")
        if self.aggregator not in AGGREGATORS:
            raise InvalidArgument(
                f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}"
            )
        if self.attention_layer is None:
            object.__setattr__(self, "attention_layer", self.anchor_layer)
        elif not isinstance(self.attention_layer, int) or self.attention_layer < 0:
            raise InvalidArgument(f"attention_layer must be a non-negative int, got {self.attention_layer!r}")
        if self.token_filter is not None:
            object.__setattr__(self, "token_filter", frozenset(int(t) for t in self.token_filter))
        if not (self.temperature > 0.0) or not np.isfinite(self.temperature):
            raise InvalidArgument(f"temperature must be positive, got {self.temperature!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgument(f"seed must be a non-negative int, got {self.seed!r}")


@dataclass
class StepTrace:
    """Everything one decoding step needs from the model.

    context_tokens is the full token context (prompt plus generated
    tokens); attention is the head-averaged attention row of the current
    query position over that context; layer_logits maps layer index to
    next-token logits.
    """

    context_tokens: tuple[int, ...]
    source_span: SourceSpan
    layer_logits: dict[int, np.ndarray]
    attention: np.ndarray

    def __post_init__(self):
        self.context_tokens = tuple(int(t) for t in self.context_tokens)
        if not self.context_tokens:
            raise InvalidArgument("context_tokens must be non-empty")
        if not self.layer_logits:
            raise InvalidArgument("layer_logits must be non-empty")
        sizes = {np.asarray(v).shape for v in self.layer_logits.values()}
        if len(sizes) != 1 or next(iter(sizes)) == (0,) or len(next(iter(sizes))) != 1:
            raise InvalidArgument(f"layer logits must share one non-empty 1-D shape, got {sizes}")
        vocab = next(iter(sizes))[0]
        if any(t < 0 or t >= vocab for t in self.context_tokens):
            raise InvalidArgument("context token id outside [0, vocab)")
        attn = np.asarray(self.attention)
        if attn.ndim != 1 or attn.shape[0] != len(self.context_tokens):
            raise InvalidArgument(
                f"attention length {attn.shape} must match context length {len(self.context_tokens)}"
            )
        if not np.all(np.isfinite(attn)) or np.any(attn < 0):
            raise InvalidArgument("attention weights must be finite and non-negative")
        if self.source_span.end > len(self.context_tokens):
            raise InvalidArgument(
                f"span end {self.source_span.end} exceeds context length {len(self.context_tokens)}"
            )

    @property
    def vocab_size(self) -> int:
        return int(np.asarray(next(iter(self.layer_logits.values()))).shape[0])


@dataclass
class StepDiagnostics:
    """Per-step introspection: the gate, its inputs, and the pointer mass.

    layer_divergence and raw_divergence are only populated by
    decode_step(..., detail=True); the lean path reports an empty dict
    and None because it may stop scanning layers early.
    """

    p_cp: float
    layer_divergence: dict[int, float]
    span_mass: dict[int, float]
    degenerate_span: bool = False
    raw_divergence: float | None = None


def aggregate_heads(per_head_rows: Sequence) -> np.ndarray:
    """Average per-head attention rows into one row (uniform head weights)."""
    if len(per_head_rows) == 0:
        raise InvalidArgument("need at least one attention head")
    rows = []
    for i, row in enumerate(per_head_rows):
        arr = np.asarray(row, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidArgument(f"head {i} must be a non-empty 1-D row")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise InvalidArgument(f"head {i} has negative or non-finite weights")
        rows.append(arr)
    if len({r.size for r in rows}) != 1:
        raise InvalidArgument("attention heads must share one row length")
    return np.mean(np.stack(rows, axis=0), axis=0)


def expand_layer_selector(
    selector, anchor_layer: int, available: Iterable[int] | None = None
) -> tuple[int, ...]:
    """Expand a layer selector into explicit indices below the anchor.

    Accepts 'lastK', 'lastK:even', 'lastK:odd', or an explicit iterable
    of indices.  The anchor itself is never included.  When available is
    given, indices outside it are dropped (explicit lists that mention a
    missing layer are an error instead).
    """
    avail = None if available is None else {int(j) for j in available}
    if isinstance(selector, str):
        match = _LAST_K.match(selector.strip())
        if not match:
            raise InvalidArgument(
                f"bad layer selector {selector!r}: expected 'lastK', 'lastK:even', 'lastK:odd'"
            )
        k = int(match.group(1))
        if k < 1:
            raise InvalidArgument("layer selector needs K >= 1")
        layers = list(range(max(0, anchor_layer - k), anchor_layer))
        if match.group(2) == "even":
            layers = [j for j in layers if j % 2 == 0]
        elif match.group(2) == "odd":
            layers = [j for j in layers if j % 2 == 1]
        if avail is not None:
            layers = [j for j in layers if j in avail]
    else:
        layers = [int(j) for j in selector]
        if len(set(layers)) != len(layers):
            raise InvalidArgument(f"duplicate layer indices: {layers}")
        for j in layers:
            if j < 0 or j >= anchor_layer:
                raise InvalidArgument(f"layer {j} must lie in [0, anchor {anchor_layer})")
            if avail is not None and j not in avail:
                raise InvalidArgument(f"layer {j} not provided by the backend")
    if not layers:
        raise InvalidArgument(f"layer selector {selector!r} selects no layers")
    return tuple(sorted(layers))


def _pointer_sparse(
    trace: StepTrace, token_filter: frozenset[int] | None
) -> tuple[np.ndarray, np.ndarray]:
    """Span token ids plus their normalized attention weights."""
    span = trace.source_span
    weights = np.asarray(trace.attention[span.start : span.end], dtype=np.float64)
    tokens = np.asarray(trace.context_tokens[span.start : span.end], dtype=np.intp)
    if token_filter:
        keep = ~np.isin(tokens, np.fromiter(token_filter, dtype=np.intp))
        weights = weights[keep]
        tokens = tokens[keep]
        if tokens.size == 0:
            raise DegenerateSpan("token filter removed every span position")
    return tokens, probcore.normalize_span(weights)


def pointer_distribution(trace: StepTrace, token_filter: frozenset[int] | None = None) -> np.ndarray:
    """Scatter normalized span attention onto vocabulary token ids.

    Positions whose token is in token_filter are dropped before
    normalization.  Raises DegenerateSpan when nothing scorable remains.
    """
    tokens, normalized = _pointer_sparse(trace, token_filter)
    out = np.zeros(trace.vocab_size, dtype=np.float64)
    np.add.at(out, tokens, normalized)
    return out


def _aggregate(values: Sequence[float], aggregator: str) -> float:
    if aggregator == "mean":
        return float(np.mean(values))
    if aggregator == "max":
        return float(np.max(values))
    if aggregator == "min":
        return float(np.min(values))
    raise InvalidArgument(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")


def copy_probability(
    anchor_dist: np.ndarray, layer_dists: Sequence[np.ndarray], config: PigConfig
) -> float:
    """Gate value: clipped, scaled aggregate divergence from the anchor."""
    if len(layer_dists) == 0:
        raise InvalidArgument("need at least one early-exit distribution")
    divergences = [probcore.jsd(anchor_dist, q) for q in layer_dists]
    raw = _aggregate(divergences, config.aggregator)
    return min(config.alpha * raw, config.clip_max)


def mix_distributions(p_cp: float, source: np.ndarray, vocab: np.ndarray) -> np.ndarray:
    """Convex combination p_cp * source + (1 - p_cp) * vocab."""
    if not (0.0 <= p_cp <= 1.0):
        raise InvalidArgument(f"p_cp must lie in [0, 1], got {p_cp!r}")
    src = np.asarray(source, dtype=np.float64)
    voc = np.asarray(vocab, dtype=np.float64)
    if src.shape != voc.shape:
        raise InvalidArgument(f"shape mismatch {src.shape} vs {voc.shape}")
    return p_cp * src + (1.0 - p_cp) * voc


def _gate_scan(
    trace: StepTrace,
    config: PigConfig,
    anchor_raw,
    anchor_ref: np.ndarray,
    detail: bool,
    bufs: dict[str, np.ndarray],
) -> tuple[float, dict[int, float], float | None]:
    """Scan the early-exit layers and return (p_cp, divergences, raw).

    On the lean path (detail=False) the scan stops as soon as a running
    lower bound on the aggregate already pins the gate at clip_max; the
    bound only grows under "mean"/"max" (floating-point addition of
    non-negative terms and running maxima are monotone), so the final
    p_cp is bit-identical to the full scan.  "min" can drop with later
    layers and never exits early.
    """
    if not detail and config.alpha == 0.0:
        return 0.0, {}, None

    count = len(config.layer_set)
    divergences: dict[int, float] = {}
    total = 0.0
    best = -np.inf if config.aggregator == "max" else np.inf
    for j in config.layer_set:
        layer_raw = trace.layer_logits[j]
        if layer_raw is anchor_raw or np.array_equal(layer_raw, anchor_raw):
            # equal logits softmax to the same vector, so the divergence
            # is an exact zero; skip the arithmetic that would confirm it
            div = 0.0
        else:
            q = _softmax_into(layer_raw, 1.0, bufs["scratch"], bufs["q"])
            div = _fresh_jsd(anchor_ref, q, bufs)
        if detail:
            divergences[j] = float(div)
        if config.aggregator == "mean":
            total += div
            bound = total / count
        elif config.aggregator == "max":
            best = div if div > best else best
            bound = best
        else:
            best = div if div < best else best
            bound = None
        if not detail and bound is not None and config.alpha * bound >= config.clip_max:
            return config.clip_max, divergences, None
    raw = float(total / count if config.aggregator == "mean" else best)
    return min(config.alpha * raw, config.clip_max), divergences, raw


def decode_step(
    trace: StepTrace, config: PigConfig, *, detail: bool = True
) -> tuple[np.ndarray, StepDiagnostics]:
    """Compute the mixed next-token distribution for one step.

    A degenerate span (no positive mass, or fully filtered) forces
    p_cp = 0 and falls back to the anchor distribution rather than
    failing the step.  detail=False skips the per-layer divergence
    record and lets the gate stop scanning layers once the clip is
    already guaranteed; the returned distribution is identical.
    """
    if config.anchor_layer not in trace.layer_logits:
        raise InvalidArgument(f"trace is missing anchor layer {config.anchor_layer}")
    missing = [j for j in config.layer_set if j not in trace.layer_logits]
    if missing:
        raise InvalidArgument(f"trace is missing early-exit layers {missing}")

    vocab = trace.vocab_size
    bufs = _buffers(vocab)
    anchor_raw = trace.layer_logits[config.anchor_layer]
    vocab_dist = _softmax_into(anchor_raw, config.temperature, bufs["scratch"], bufs["vdist"])
    anchor_ref = (
        vocab_dist
        if config.temperature == 1.0
        else _softmax_into(anchor_raw, 1.0, bufs["scratch"], bufs["anchor"])
    )

    p_cp, layer_divergence, raw = _gate_scan(trace, config, anchor_raw, anchor_ref, detail, bufs)

    degenerate = False
    span_tokens = span_weights = None
    try:
        span_tokens, span_weights = _pointer_sparse(trace, config.token_filter)
    except DegenerateSpan:
        degenerate = True
        p_cp = 0.0

    # mixed = p_cp * P_source + (1 - p_cp) * P_vocab, with the pointer
    # term scattered onto its (few) span token ids instead of through a
    # dense vocabulary-sized vector
    mixed = np.multiply(vocab_dist, 1.0 - p_cp, out=np.empty(vocab, dtype=np.float64))
    span_mass: dict[int, float] = {}
    if not degenerate:
        if p_cp != 0.0:
            np.add.at(mixed, span_tokens, p_cp * span_weights)
        for tok, weight in zip(span_tokens.tolist(), span_weights.tolist()):
            if weight != 0.0:
                span_mass[tok] = span_mass.get(tok, 0.0) + weight
    diagnostics = StepDiagnostics(
        p_cp=float(p_cp),
        layer_divergence=layer_divergence,
        span_mass=span_mass,
        degenerate_span=degenerate,
        raw_divergence=raw,
    )
    return mixed, diagnostics
