"""Sequence-level decoding on top of single-step mixtures.

generate() drives a backend session with greedy or seeded ancestral
sampling; score_sequence() teacher-forces a candidate and sums log
probabilities under the mixed distribution.  Both are pure functions of
(session contents, config, params): replaying the same trace with the
same seed reproduces the same output exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .backend import BackendSession
from .engine import PigConfig, StepDiagnostics, decode_step
from .errors import EndOfTrace, InvalidArgument, PigError, annotate

STOP_REASONS = ("stop-token", "length", "end-of-trace")


@dataclass(frozen=True)
class SamplingParams:
    """How to turn step distributions into tokens."""

    mode: str = "sample"
    temperature: float = 0.8
    max_new_tokens: int = 256
    stop_tokens: frozenset[int] = frozenset()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise InvalidArgument(f"mode must be 'greedy' or 'sample', got {self.mode!r}")
        if not (self.temperature > 0.0) or not np.isfinite(self.temperature):
            raise InvalidArgument(f"temperature must be positive, got {self.temperature!r}")
        if self.max_new_tokens < 1:
            raise InvalidArgument(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        object.__setattr__(self, "stop_tokens", frozenset(int(t) for t in self.stop_tokens))
        if not isinstance(self.seed, int) or self.seed < 0:
            raise InvalidArgument(f"seed must be a non-negative int, got {self.seed!r}")


@dataclass
class GenerationResult:
    """Generated tokens plus per-step values of the gate and chosen prob."""

    tokens: list[int]
    p_cp: list[float]
    token_prob: list[float]
    stop_reason: str
    diagnostics: list[StepDiagnostics]


@dataclass
class StepScore:
    """One teacher-forced step: the token, its log prob, diagnostics."""

    token: int
    log_prob: float
    diagnostics: StepDiagnostics


def _sample_token(dist: np.ndarray, rng: np.random.Generator) -> int:
    # Inverse-CDF draw in token-id order: one uniform per step keeps the
    # stream reproducible regardless of vocabulary size.
    cum = np.cumsum(dist)
    token = int(np.searchsorted(cum, rng.random(), side="right"))
    return min(token, dist.shape[0] - 1)


def generate(
    session: BackendSession, config: PigConfig, params: SamplingParams
) -> GenerationResult:
    """Decode until a stop token, the length budget, or trace exhaustion."""
    step_config = replace(config, temperature=params.temperature)
    rng = np.random.default_rng(params.seed)
    tokens: list[int] = []
    p_cps: list[float] = []
    probs: list[float] = []
    diags: list[StepDiagnostics] = []
    stop_reason = "length"
    for i in range(params.max_new_tokens):
        try:
            trace = session.next_step()
        except EndOfTrace:
            stop_reason = "end-of-trace"
            break
        except PigError as exc:
            raise annotate(exc, f"generation step {i}") from exc
        dist, diag = decode_step(trace, step_config, detail=False)
        if params.mode == "greedy":
            token = int(np.argmax(dist))
        else:
            token = _sample_token(dist, rng)
        session.advance(token)
        tokens.append(token)
        p_cps.append(diag.p_cp)
        probs.append(float(dist[token]))
        diags.append(diag)
        if token in params.stop_tokens:
            stop_reason = "stop-token"
            break
    return GenerationResult(
        tokens=tokens, p_cp=p_cps, token_prob=probs, stop_reason=stop_reason, diagnostics=diags
    )


def score_steps(
    session: BackendSession, candidate: Sequence[int], config: PigConfig
) -> list[StepScore]:
    """Teacher-force candidate through the session, one StepScore per token."""
    cand = [int(t) for t in candidate]
    for t in cand:
        if t < 0 or t >= session.vocab_size:
            raise InvalidArgument(f"candidate token id {t} outside [0, {session.vocab_size})")
    scores: list[StepScore] = []
    for i, token in enumerate(cand):
        try:
            trace = session.next_step(forced_token=token)
        except PigError as exc:
            raise annotate(exc, f"scoring step {i}") from exc
        dist, diag = decode_step(trace, config, detail=False)
        with np.errstate(divide="ignore"):
            log_prob = float(np.log(dist[token]))
        scores.append(StepScore(token=token, log_prob=log_prob, diagnostics=diag))
    return scores


def score_sequence(
    session: BackendSession,
    candidate: Sequence[int],
    config: PigConfig,
    *,
    per_token_average: bool = False,
) -> float:
    """Total (or mean) log probability of candidate under the mixture.

    An empty candidate scores 0.0.  With clip_max <= 0.5 every token
    keeps at least half its anchor probability, so scores stay finite
    whenever the anchor softmax is positive everywhere.
    """
    cand = list(candidate)
    if not cand:
        return 0.0
    scores = score_steps(session, cand, config)
    total = float(sum(s.log_prob for s in scores))
    if per_token_average:
        return total / len(scores)
    return total
