"""Tests for generation and teacher-forced scoring."""

import math

import numpy as np
import pytest

import helpers
import reference
from pig import (
    PigConfig,
    SamplingParams,
    SourceSpan,
    SyntheticSession,
    SyntheticSpec,
    TraceHeader,
    TraceSession,
    TraceStep,
    decode_trace,
    encode_trace,
    generate,
    score_sequence,
    score_steps,
    synth_trace,
)
from pig.errors import InvalidArgument, PigError


def synth_session(**overrides):
    fields = dict(
        seed=5,
        vocab_size=16,
        num_layers=4,
        steps=("content", "function", "content", "function", "content"),
        span_tokens=(3, 4, 5),
        prefix_tokens=(1,),
    )
    fields.update(overrides)
    return SyntheticSession(SyntheticSpec(**fields))


def single_step_session(anchor_probs, early_probs, attention, prompt, span, forced=None):
    """One-step in-memory trace with exact float64 payloads."""
    vocab = len(anchor_probs)
    header = TraceHeader(
        vocab_size=vocab,
        layers=(0, 1),
        anchor=1,
        attn_layer=1,
        prompt=tuple(prompt),
        span=SourceSpan(*span),
    )
    step = TraceStep(
        pos=0,
        layer_logits={
            0: np.log(np.asarray(early_probs, dtype=np.float64)),
            1: np.log(np.asarray(anchor_probs, dtype=np.float64)),
        },
        attention=np.asarray(attention, dtype=np.float64),
        forced=forced,
    )
    return TraceSession(header, [step])


def two_layer_config(**overrides):
    defaults = dict(anchor_layer=1, layer_set=(0,), alpha=1000.0, clip_max=0.5, temperature=1.0)
    defaults.update(overrides)
    return PigConfig(**defaults)


class TestSamplingParams:
    @pytest.mark.parametrize(
        "overrides",
        [
            {"mode": "beam"},
            {"temperature": 0.0},
            {"max_new_tokens": 0},
            {"seed": -1},
        ],
    )
    def test_bad_params_rejected(self, overrides):
        with pytest.raises(InvalidArgument):
            SamplingParams(**overrides)

    def test_stop_tokens_normalized(self):
        params = SamplingParams(stop_tokens=[3, 3, 1])
        assert params.stop_tokens == frozenset({1, 3})


class TestGenerate:
    def test_greedy_with_zero_alpha_matches_anchor_argmax(self):
        session = synth_session()
        config = helpers.config_for(num_layers=4, alpha=0.0)
        result = generate(session, config, SamplingParams(mode="greedy", max_new_tokens=5))
        replay = synth_session()
        expected = []
        for _ in range(5):
            trace = replay.next_step()
            anchor = np.asarray(trace.layer_logits[3], dtype=np.float64)
            tok = int(np.argmax(anchor))
            expected.append(tok)
            replay.advance(tok)
        assert result.tokens == expected
        assert all(p == 0.0 for p in result.p_cp)

    def test_pointer_gate_flips_greedy_choice(self):
        # Span holds only token 5; the anchor prefers token 9.  With the
        # gate clipped at 0.5 the pointer wins every content step.
        spec = dict(
            seed=11,
            vocab_size=12,
            num_layers=4,
            steps=("content", "content", "content"),
            span_tokens=(5, 5, 5),
            content_anchor_token=9,
        )
        plain = generate(
            SyntheticSession(SyntheticSpec(**spec)),
            helpers.config_for(num_layers=4, alpha=0.0),
            SamplingParams(mode="greedy", max_new_tokens=3),
        )
        pointed = generate(
            SyntheticSession(SyntheticSpec(**spec)),
            helpers.config_for(num_layers=4, alpha=1000.0),
            SamplingParams(mode="greedy", max_new_tokens=3),
        )
        assert plain.tokens == [9, 9, 9]
        assert pointed.tokens == [5, 5, 5]
        assert all(p == 0.5 for p in pointed.p_cp)

    def test_greedy_tie_breaks_to_lowest_id(self):
        session = single_step_session(
            anchor_probs=[0.1, 0.4, 0.4, 0.1],
            early_probs=[0.1, 0.4, 0.4, 0.1],
            attention=[0.5, 0.5],
            prompt=(0, 1),
            span=(0, 2),
        )
        result = generate(session, two_layer_config(), SamplingParams(mode="greedy", max_new_tokens=1))
        assert result.tokens == [1]

    def test_stop_token_ends_generation_and_is_kept(self):
        session = synth_session()
        config = helpers.config_for(num_layers=4, alpha=0.0)
        probe = generate(session, config, SamplingParams(mode="greedy", max_new_tokens=1))
        first = probe.tokens[0]
        rerun = generate(
            synth_session(),
            config,
            SamplingParams(mode="greedy", max_new_tokens=5, stop_tokens={first}),
        )
        assert rerun.tokens == [first]
        assert rerun.stop_reason == "stop-token"

    def test_length_budget(self):
        result = generate(
            synth_session(),
            helpers.config_for(num_layers=4),
            SamplingParams(mode="greedy", max_new_tokens=2),
        )
        assert len(result.tokens) == 2
        assert result.stop_reason == "length"

    def test_trace_exhaustion(self):
        result = generate(
            synth_session(steps=("function", "content")),
            helpers.config_for(num_layers=4),
            SamplingParams(mode="greedy", max_new_tokens=10),
        )
        assert len(result.tokens) == 2
        assert result.stop_reason == "end-of-trace"

    def test_sampling_is_deterministic_per_seed(self):
        config = helpers.config_for(num_layers=4)
        a = generate(synth_session(), config, SamplingParams(seed=7, max_new_tokens=5))
        b = generate(synth_session(), config, SamplingParams(seed=7, max_new_tokens=5))
        assert a.tokens == b.tokens
        assert a.token_prob == b.token_prob

    def test_sampling_frequencies_follow_the_distribution(self):
        # One-step trace whose mixed distribution is exactly the anchor
        # softmax [0.2, 0.3, 0.5]; sampling across seeds must hit each
        # token roughly proportionally.
        counts = np.zeros(3)
        trials = 600
        for seed in range(trials):
            session = single_step_session(
                anchor_probs=[0.2, 0.3, 0.5],
                early_probs=[0.2, 0.3, 0.5],
                attention=[1.0],
                prompt=(0,),
                span=(0, 1),
            )
            out = generate(
                session,
                two_layer_config(),
                SamplingParams(mode="sample", temperature=1.0, max_new_tokens=1, seed=seed),
            )
            counts[out.tokens[0]] += 1
        freq = counts / trials
        np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.08)

    def test_generation_replays_identically_through_codec(self):
        spec = SyntheticSpec(
            seed=3,
            vocab_size=16,
            num_layers=4,
            steps=("content", "function", "content"),
            span_tokens=(3, 4, 5),
        )
        direct = generate(
            SyntheticSession(spec),
            helpers.config_for(num_layers=4),
            SamplingParams(mode="greedy", max_new_tokens=3),
        )
        header, steps = synth_trace(spec)
        replayed = TraceSession(*decode_trace(encode_trace(header, steps)))
        via_codec = generate(
            replayed,
            helpers.config_for(num_layers=4),
            SamplingParams(mode="greedy", max_new_tokens=3),
        )
        assert via_codec.tokens == direct.tokens
        assert via_codec.p_cp == direct.p_cp

    def test_backend_errors_carry_step_index(self):
        session = synth_session()
        session.next_step()
        with pytest.raises(PigError, match="generation step 0"):
            generate(session, helpers.config_for(num_layers=4), SamplingParams(mode="greedy"))


class TestScoring:
    def test_hand_computed_mixture_score(self):
        # p_cp clips to 0.5; source = [0.5, 0.5, 0, 0]; anchor softmax
        # recovers [0.1, 0.2, 0.3, 0.4]; mixed[1] = 0.35.
        session = single_step_session(
            anchor_probs=[0.1, 0.2, 0.3, 0.4],
            early_probs=[0.4, 0.3, 0.2, 0.1],
            attention=[0.5, 0.5],
            prompt=(0, 1),
            span=(0, 2),
        )
        total = score_sequence(session, [1], two_layer_config())
        assert total == pytest.approx(math.log(0.35), abs=1e-9)
        assert total == pytest.approx(-1.0498221244986778, abs=1e-9)

    def test_score_steps_additivity(self):
        session = synth_session()
        candidate = [3, 7, 1, 0]
        config = helpers.config_for(num_layers=4)
        steps = score_steps(session, candidate, config)
        total = score_sequence(synth_session(), candidate, config)
        assert total == pytest.approx(sum(s.log_prob for s in steps), abs=1e-12)
        assert [s.token for s in steps] == candidate

    def test_empty_candidate_scores_zero(self):
        assert score_sequence(synth_session(), [], helpers.config_for(num_layers=4)) == 0.0

    def test_per_token_average(self):
        candidate = [3, 7]
        config = helpers.config_for(num_layers=4)
        total = score_sequence(synth_session(), candidate, config)
        mean = score_sequence(synth_session(), candidate, config, per_token_average=True)
        assert mean == pytest.approx(total / 2, abs=1e-12)

    def test_zero_alpha_score_equals_anchor_log_softmax(self):
        session = synth_session()
        candidate = [2, 9, 4]
        config = helpers.config_for(num_layers=4, alpha=0.0)
        total = score_sequence(session, candidate, config)
        replay = synth_session()
        expected = 0.0
        for tok in candidate:
            trace = replay.next_step(forced_token=tok)
            anchor = [float(x) for x in np.asarray(trace.layer_logits[3], dtype=np.float64)]
            expected += reference.ref_log_softmax(anchor)[tok]
        assert total == pytest.approx(expected, abs=1e-9)

    def test_out_of_range_candidate_rejected(self):
        with pytest.raises(InvalidArgument):
            score_steps(synth_session(), [99], helpers.config_for(num_layers=4))

    def test_scoring_beyond_trace_reports_step(self):
        session = synth_session(steps=("function",))
        with pytest.raises(PigError, match="scoring step 1"):
            score_steps(session, [1, 2], helpers.config_for(num_layers=4))

    def test_scores_are_finite_under_default_clip(self):
        rng = np.random.default_rng(31)
        for seed in range(20):
            session = synth_session(seed=seed)
            candidate = [int(t) for t in rng.integers(0, 16, 5)]
            total = score_sequence(session, candidate, helpers.config_for(num_layers=4))
            assert math.isfinite(total)
