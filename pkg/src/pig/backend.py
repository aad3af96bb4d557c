"""Model-access boundary: trace codec, replay sessions, synthetic backend.

A trace file (.pigtrace) is UTF-8 JSON lines.  The first line is a
header:

    {"v": 1, "vocab": V, "layers": [...], "anchor": N, "attn_layer": A,
     "prompt": [ids], "span": [start, end], "meta": {...}}

Each following line is one decoding step:

    {"pos": t, "logits": {"<layer>": "<b64>", ...}, "attn": "<b64>",
     "forced": id?}

Float payloads are little-endian float32, base64 encoded.  Unknown meta
keys are preserved verbatim; unknown top-level keys are rejected.
Logits are stored raw (not as distributions) so downstream temperature
choices stay free.
"""

from __future__ import annotations

import abc
import base64
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import probcore
from .engine import SourceSpan, StepTrace
from .errors import (
    EndOfTrace,
    InvalidArgument,
    SchemaError,
    SequenceError,
    UnsupportedVersion,
)

TRACE_VERSION = 1
_HEADER_KEYS = ("v", "vocab", "layers", "anchor", "attn_layer", "prompt", "span", "meta")
_STEP_KEYS = ("pos", "logits", "attn", "forced")


@dataclass(frozen=True)
class TraceHeader:
    """Static facts shared by every step of one trace."""

    vocab_size: int
    layers: tuple[int, ...]
    anchor: int
    attn_layer: int
    prompt: tuple[int, ...]
    span: SourceSpan
    meta: Mapping[str, Any] = field(default_factory=dict)
    version: int = TRACE_VERSION


@dataclass
class TraceStep:
    """One recorded step: per-layer logits plus the attention row."""

    pos: int
    layer_logits: dict[int, np.ndarray]
    attention: np.ndarray
    forced: int | None = None


def _expect_int(value, field_name: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError(field_name, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise SchemaError(field_name, f"expected >= {minimum}, got {value}")
    return value


def _expect_int_list(value, field_name: str) -> list[int]:
    if not isinstance(value, list):
        raise SchemaError(field_name, f"expected a list, got {type(value).__name__}")
    return [_expect_int(v, field_name) for v in value]


def _encode_f32(values) -> str:
    arr = np.asarray(values, dtype="<f4")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _decode_f32(text, field_name: str, expected_len: int) -> np.ndarray:
    if not isinstance(text, str):
        raise SchemaError(field_name, f"expected base64 text, got {type(text).__name__}")
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise SchemaError(field_name, f"bad base64 payload: {exc}") from None
    if len(raw) % 4 != 0:
        raise SchemaError(field_name, f"payload length {len(raw)} is not a multiple of 4")
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if arr.shape[0] != expected_len:
        raise SchemaError(field_name, f"expected {expected_len} floats, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise SchemaError(field_name, "payload contains non-finite values")
    return arr


def validate_header(header: TraceHeader) -> TraceHeader:
    """Check header invariants; raises SchemaError naming the bad field."""
    if header.version != TRACE_VERSION:
        raise UnsupportedVersion(f"unsupported trace version {header.version!r}")
    vocab = _expect_int(header.vocab_size, "vocab", minimum=1)
    layers = tuple(_expect_int(j, "layers", minimum=0) for j in header.layers)
    if not layers:
        raise SchemaError("layers", "must be non-empty")
    if len(set(layers)) != len(layers):
        raise SchemaError("layers", f"duplicate layer indices: {list(layers)}")
    anchor = _expect_int(header.anchor, "anchor")
    if anchor not in layers:
        raise SchemaError("anchor", f"anchor {anchor} is not among declared layers {list(layers)}")
    _expect_int(header.attn_layer, "attn_layer", minimum=0)
    if not header.prompt:
        raise SchemaError("prompt", "must be non-empty")
    for t in header.prompt:
        tok = _expect_int(t, "prompt")
        if tok < 0 or tok >= vocab:
            raise SchemaError("prompt", f"token id {tok} outside [0, {vocab})")
    span = header.span
    if not (0 <= span.start < span.end <= len(header.prompt)):
        raise SchemaError(
            "span", f"[{span.start}, {span.end}) does not fit prompt of length {len(header.prompt)}"
        )
    if not isinstance(header.meta, Mapping):
        raise SchemaError("meta", f"expected a JSON object, got {type(header.meta).__name__}")
    return header


def _validate_step(step: TraceStep, header: TraceHeader, expected_pos: int) -> None:
    if step.pos != expected_pos:
        raise SchemaError("pos", f"expected step {expected_pos}, got {step.pos}")
    declared = set(header.layers)
    present = set(step.layer_logits)
    if present != declared:
        raise SchemaError(
            "logits",
            f"step {step.pos} layers {sorted(present)} do not match header layers {sorted(declared)}",
        )
    for j, arr in step.layer_logits.items():
        vec = np.asarray(arr)
        if vec.ndim != 1 or vec.shape[0] != header.vocab_size:
            raise SchemaError("logits", f"layer {j} logits have wrong length at step {step.pos}")
        if not np.all(np.isfinite(vec)):
            raise SchemaError("logits", f"layer {j} logits are non-finite at step {step.pos}")
    attn = np.asarray(step.attention)
    expected_len = len(header.prompt) + step.pos
    if attn.ndim != 1 or attn.shape[0] != expected_len:
        raise SchemaError(
            "attn", f"step {step.pos} attention has length {attn.shape}, expected {expected_len}"
        )
    if not np.all(np.isfinite(attn)) or np.any(attn < 0):
        raise SchemaError("attn", f"step {step.pos} attention must be finite and non-negative")
    if step.forced is not None:
        forced = _expect_int(step.forced, "forced")
        if forced < 0 or forced >= header.vocab_size:
            raise SchemaError("forced", f"token id {forced} outside [0, {header.vocab_size})")


def encode_trace(header: TraceHeader, steps: Sequence[TraceStep]) -> bytes:
    """Serialize a validated header and step sequence to trace bytes."""
    try:
        validate_header(header)
        for i, step in enumerate(steps):
            _validate_step(step, header, i)
    except SchemaError as exc:
        raise InvalidArgument(f"cannot encode trace: {exc}") from exc
    lines = []
    head = {
        "v": header.version,
        "vocab": header.vocab_size,
        "layers": list(header.layers),
        "anchor": header.anchor,
        "attn_layer": header.attn_layer,
        "prompt": list(header.prompt),
        "span": [header.span.start, header.span.end],
        "meta": dict(header.meta),
    }
    try:
        lines.append(json.dumps(head, separators=(",", ":"), sort_keys=False))
    except TypeError as exc:
        raise InvalidArgument(f"meta is not JSON-serializable: {exc}") from None
    for step in steps:
        record: dict[str, Any] = {
            "pos": step.pos,
            "logits": {str(j): _encode_f32(step.layer_logits[j]) for j in sorted(step.layer_logits)},
            "attn": _encode_f32(step.attention),
        }
        if step.forced is not None:
            record["forced"] = int(step.forced)
        lines.append(json.dumps(record, separators=(",", ":"), sort_keys=False))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_header(obj: Any) -> TraceHeader:
    if not isinstance(obj, dict):
        raise SchemaError("v", "header line is not a JSON object")
    for key in obj:
        if key not in _HEADER_KEYS:
            raise SchemaError(key, "unknown header field")
    for key in _HEADER_KEYS:
        if key not in obj:
            raise SchemaError(key, "missing header field")
    version = _expect_int(obj["v"], "v")
    if version != TRACE_VERSION:
        raise UnsupportedVersion(f"unsupported trace version {version}")
    vocab = _expect_int(obj["vocab"], "vocab", minimum=1)
    layers = tuple(_expect_int_list(obj["layers"], "layers"))
    anchor = _expect_int(obj["anchor"], "anchor")
    attn_layer = _expect_int(obj["attn_layer"], "attn_layer")
    prompt = tuple(_expect_int_list(obj["prompt"], "prompt"))
    span_pair = _expect_int_list(obj["span"], "span")
    if len(span_pair) != 2:
        raise SchemaError("span", f"expected [start, end], got {obj['span']!r}")
    try:
        span = SourceSpan(span_pair[0], span_pair[1])
    except InvalidArgument as exc:
        raise SchemaError("span", str(exc)) from None
    if not isinstance(obj["meta"], dict):
        raise SchemaError("meta", f"expected a JSON object, got {type(obj['meta']).__name__}")
    header = TraceHeader(
        vocab_size=vocab,
        layers=layers,
        anchor=anchor,
        attn_layer=attn_layer,
        prompt=prompt,
        span=span,
        meta=obj["meta"],
        version=version,
    )
    return validate_header(header)


def _parse_step(obj: Any, header: TraceHeader, expected_pos: int) -> TraceStep:
    if not isinstance(obj, dict):
        raise SchemaError("pos", f"step line {expected_pos} is not a JSON object")
    for key in obj:
        if key not in _STEP_KEYS:
            raise SchemaError(key, "unknown step field")
    for key in ("pos", "logits", "attn"):
        if key not in obj:
            raise SchemaError(key, f"missing step field at step {expected_pos}")
    pos = _expect_int(obj["pos"], "pos", minimum=0)
    if pos != expected_pos:
        raise SchemaError("pos", f"expected step {expected_pos}, got {pos}")
    raw_logits = obj["logits"]
    if not isinstance(raw_logits, dict):
        raise SchemaError("logits", "expected an object mapping layer to payload")
    layer_logits: dict[int, np.ndarray] = {}
    for key, payload in raw_logits.items():
        try:
            layer = int(key)
        except ValueError:
            raise SchemaError("logits", f"non-integer layer key {key!r}") from None
        layer_logits[layer] = _decode_f32(payload, "logits", header.vocab_size)
    attention = _decode_f32(obj["attn"], "attn", len(header.prompt) + pos)
    forced = obj.get("forced")
    if forced is not None:
        forced = _expect_int(forced, "forced")
    step = TraceStep(pos=pos, layer_logits=layer_logits, attention=attention, forced=forced)
    _validate_step(step, header, expected_pos)
    return step


def decode_trace(data: bytes) -> tuple[TraceHeader, list[TraceStep]]:
    """Parse trace bytes, validating every record against the schema."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise SchemaError("v", f"trace is not valid UTF-8: {exc}") from None
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise SchemaError("v", "trace is empty")
    parsed = []
    for i, line in enumerate(lines):
        try:
            parsed.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise SchemaError("json", f"line {i + 1} is not valid JSON: {exc}") from None
    header = _parse_header(parsed[0])
    steps = [_parse_step(obj, header, i) for i, obj in enumerate(parsed[1:])]
    return header, steps


def write_trace_file(path, header: TraceHeader, steps: Sequence[TraceStep]) -> None:
    data = encode_trace(header, steps)
    with open(path, "wb") as fh:
        fh.write(data)


def read_trace_file(path) -> tuple[TraceHeader, list[TraceStep]]:
    with open(path, "rb") as fh:
        return decode_trace(fh.read())


def attach_forced(steps: Sequence[TraceStep], tokens: Sequence[int]) -> list[TraceStep]:
    """Return a copy of steps with forced token ids filled in."""
    if len(steps) != len(tokens):
        raise InvalidArgument(f"{len(tokens)} forced tokens for {len(steps)} steps")
    return [replace(step, forced=int(tok)) for step, tok in zip(steps, tokens)]


class BackendSession(abc.ABC):
    """Strictly sequential step provider.

    Call next_step() to obtain the StepTrace for the current position,
    then advance(token) with the chosen token.  Passing forced_token to
    next_step combines both for teacher-forced scoring.  Stepping again
    before advancing raises SequenceError.
    """

    def __init__(
        self,
        prompt: Sequence[int],
        span: SourceSpan,
        vocab_size: int,
        layers: Sequence[int],
        anchor_layer: int,
        attn_layer: int,
    ):
        self._prompt = tuple(int(t) for t in prompt)
        self._span = span
        self._vocab = int(vocab_size)
        self._layers = tuple(int(j) for j in layers)
        self._anchor = int(anchor_layer)
        self._attn_layer = int(attn_layer)
        self._context = list(self._prompt)
        self._pos = 0
        self._pending = False

    @property
    def prompt_tokens(self) -> tuple[int, ...]:
        return self._prompt

    @property
    def source_span(self) -> SourceSpan:
        return self._span

    @property
    def vocab_size(self) -> int:
        return self._vocab

    @property
    def layers(self) -> tuple[int, ...]:
        return self._layers

    @property
    def anchor_layer(self) -> int:
        return self._anchor

    @property
    def attn_layer(self) -> int:
        return self._attn_layer

    @property
    def position(self) -> int:
        """Number of steps already emitted."""
        return self._pos

    def next_step(self, forced_token: int | None = None) -> StepTrace:
        if self._pending:
            raise SequenceError("previous step was not advanced")
        layer_logits, attention = self._step_payload(self._pos)
        trace = StepTrace(
            context_tokens=tuple(self._context),
            source_span=self._span,
            layer_logits=layer_logits,
            attention=attention,
        )
        self._pos += 1
        if forced_token is None:
            self._pending = True
        else:
            self._append(forced_token)
        return trace

    def advance(self, token: int) -> None:
        if not self._pending:
            raise SequenceError("no pending step to advance")
        self._append(token)
        self._pending = False

    def _append(self, token: int) -> None:
        tok = int(token)
        if tok < 0 or tok >= self._vocab:
            raise InvalidArgument(f"token id {tok} outside [0, {self._vocab})")
        self._context.append(tok)

    @abc.abstractmethod
    def _step_payload(self, pos: int) -> tuple[dict[int, np.ndarray], np.ndarray]:
        """Return (layer_logits, attention) for step pos or raise EndOfTrace."""


class TraceSession(BackendSession):
    """Replays a recorded trace step by step."""

    def __init__(self, header: TraceHeader, steps: Sequence[TraceStep]):
        super().__init__(
            prompt=header.prompt,
            span=header.span,
            vocab_size=header.vocab_size,
            layers=header.layers,
            anchor_layer=header.anchor,
            attn_layer=header.attn_layer,
        )
        self._header = header
        self._steps = list(steps)

    @classmethod
    def from_file(cls, path) -> "TraceSession":
        header, steps = read_trace_file(path)
        return cls(header, steps)

    @property
    def header(self) -> TraceHeader:
        return self._header

    @property
    def step_count(self) -> int:
        return len(self._steps)

    def recorded_tokens(self) -> tuple[int, ...]:
        """Forced token ids recorded in the trace, for scoring replay."""
        tokens = []
        for i, step in enumerate(self._steps):
            if step.forced is None:
                raise InvalidArgument(f"trace records no forced token at step {i}")
            tokens.append(step.forced)
        return tuple(tokens)

    def _step_payload(self, pos: int) -> tuple[dict[int, np.ndarray], np.ndarray]:
        if pos >= len(self._steps):
            raise EndOfTrace(f"trace ends after {len(self._steps)} steps")
        step = self._steps[pos]
        return dict(step.layer_logits), np.asarray(step.attention)


@dataclass(frozen=True)
class SyntheticSpec:
    """Plan for a deterministic synthetic trace.

    Step kinds: 'function' steps emit identical logits at every layer so
    the divergence gate reads exactly zero; 'content' steps boost one
    token at the anchor and a different token at every other layer,
    producing anchor/early-exit divergence of at least content_jsd_floor.
    The prompt is prefix_tokens + span_tokens + suffix_tokens and the
    source span covers exactly span_tokens.
    """

    seed: int
    vocab_size: int
    num_layers: int
    steps: tuple[str, ...]
    span_tokens: tuple[int, ...]
    prefix_tokens: tuple[int, ...] = ()
    suffix_tokens: tuple[int, ...] = ()
    divergence_boost: float = 8.0
    content_jsd_floor: float = 0.1
    content_anchor_token: int | None = None

    def __post_init__(self):
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgument(f"seed must be a non-negative int, got {self.seed!r}")
        if self.vocab_size < 2:
            raise InvalidArgument(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.num_layers < 2:
            raise InvalidArgument(f"num_layers must be >= 2, got {self.num_layers}")
        normalized = []
        for kind in self.steps:
            long = {"f": "function", "c": "content"}.get(kind, kind)
            if long not in ("function", "content"):
                raise InvalidArgument(f"unknown step kind {kind!r}")
            normalized.append(long)
        object.__setattr__(self, "steps", tuple(normalized))
        object.__setattr__(self, "span_tokens", tuple(int(t) for t in self.span_tokens))
        object.__setattr__(self, "prefix_tokens", tuple(int(t) for t in self.prefix_tokens))
        object.__setattr__(self, "suffix_tokens", tuple(int(t) for t in self.suffix_tokens))
        if not self.span_tokens:
            raise InvalidArgument("span_tokens must be non-empty")
        for t in self.prefix_tokens + self.span_tokens + self.suffix_tokens:
            if t < 0 or t >= self.vocab_size:
                raise InvalidArgument(f"token id {t} outside [0, {self.vocab_size})")
        if not (self.divergence_boost > 0.0):
            raise InvalidArgument("divergence_boost must be positive")
        if self.content_jsd_floor < 0.0:
            raise InvalidArgument("content_jsd_floor must be >= 0")
        if self.content_anchor_token is not None and not (
            0 <= self.content_anchor_token < self.vocab_size
        ):
            raise InvalidArgument(
                f"content_anchor_token {self.content_anchor_token} outside [0, {self.vocab_size})"
            )

    @property
    def prompt(self) -> tuple[int, ...]:
        return self.prefix_tokens + self.span_tokens + self.suffix_tokens

    @property
    def span(self) -> SourceSpan:
        start = len(self.prefix_tokens)
        return SourceSpan(start, start + len(self.span_tokens))


def synth_trace(spec: SyntheticSpec) -> tuple[TraceHeader, list[TraceStep]]:
    """Materialize the synthetic trace a SyntheticSpec describes.

    Fully deterministic: equal SyntheticSpec values always yield the
    same header and step payloads, so dumps are byte-identical across
    runs.
    """
    rng = np.random.default_rng(spec.seed)
    prompt = spec.prompt
    anchor = spec.num_layers - 1
    layers = tuple(range(spec.num_layers))
    steps: list[TraceStep] = []
    for k, kind in enumerate(spec.steps):
        attention = (rng.random(len(prompt) + k) + 0.05).astype(np.float32)
        base = rng.normal(0.0, 1.0, spec.vocab_size)
        if kind == "function":
            shared = base.astype(np.float32)
            layer_logits = {j: shared for j in layers}
        else:
            if spec.content_anchor_token is not None:
                a = spec.content_anchor_token
            else:
                a = int(rng.integers(spec.vocab_size))
            b = int(rng.integers(spec.vocab_size - 1))
            if b >= a:
                b += 1
            anchor_logits = base.copy()
            anchor_logits[a] += spec.divergence_boost
            early_logits = base.copy()
            early_logits[b] += spec.divergence_boost
            anchor32 = anchor_logits.astype(np.float32)
            early32 = early_logits.astype(np.float32)
            achieved = probcore.jsd(probcore.softmax(anchor32), probcore.softmax(early32))
            if achieved < spec.content_jsd_floor:
                raise InvalidArgument(
                    f"content step {k} reaches divergence {achieved:.6f}, below the "
                    f"configured floor {spec.content_jsd_floor}; raise divergence_boost"
                )
            layer_logits = {j: early32 for j in layers[:-1]}
            layer_logits[anchor] = anchor32
        steps.append(TraceStep(pos=k, layer_logits=layer_logits, attention=attention))
    header = TraceHeader(
        vocab_size=spec.vocab_size,
        layers=layers,
        anchor=anchor,
        attn_layer=anchor,
        prompt=prompt,
        span=spec.span,
        meta={
            "source": "synthetic",
            "seed": spec.seed,
            "plan": ",".join(kind[0] for kind in spec.steps),
        },
    )
    return header, steps


class SyntheticSession(TraceSession):
    """Session over a synthetic trace built from a SyntheticSpec."""

    def __init__(self, spec: SyntheticSpec):
        header, steps = synth_trace(spec)
        super().__init__(header, steps)
        self.spec = spec
