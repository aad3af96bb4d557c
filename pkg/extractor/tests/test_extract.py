"""Unit tests: span mapping, capture math, emitted files, and cleanup."""

import importlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

from pig import read_trace_file
from pigtrace_extractor import (
    ExtractionError,
    ExtractionJob,
    SpanMappingError,
    extract,
    map_char_span,
    resolve_layers,
    write_manifest,
)
from conftest import NUM_LAYERS, word_prompt

extract_module = importlib.import_module("pigtrace_extractor.extract")


class TestSpanMapping:
    OFFSETS = [(0, 2), (3, 5), (6, 8), (9, 11)]
    PROMPT = "w1 w2 w3 w4"

    def test_exact_word_range(self):
        assert map_char_span(self.OFFSETS, (3, 8), self.PROMPT) == (1, 3)

    def test_partial_overlap_pulls_in_the_token(self):
        assert map_char_span(self.OFFSETS, (4, 7), self.PROMPT) == (1, 3)
        assert map_char_span(self.OFFSETS, (0, 1), self.PROMPT) == (0, 1)

    def test_whitespace_only_span_is_rejected_with_diagnostics(self):
        with pytest.raises(SpanMappingError) as excinfo:
            map_char_span(self.OFFSETS, (2, 3), self.PROMPT)
        message = str(excinfo.value)
        assert "[2, 3)" in message
        assert "covers no tokens" in message
        assert "token 0 at [0, 2)" in message
        assert excinfo.value.span_chars == (2, 3)

    def test_random_spans_always_map_to_contiguous_ranges(self, runtime):
        rng = np.random.default_rng(42)
        for _ in range(50):
            prompt = word_prompt(rng, int(rng.integers(3, 12)))
            ids, offsets = runtime.encode_with_offsets(prompt)
            lo = int(rng.integers(0, len(prompt) - 1))
            hi = int(rng.integers(lo + 1, len(prompt) + 1))
            try:
                start, end = map_char_span(offsets, (lo, hi), prompt)
            except SpanMappingError:
                # the span fell entirely inside whitespace
                assert prompt[lo:hi].strip() == ""
                continue
            assert 0 <= start < end <= len(ids)
            covered = prompt[offsets[start][0]:offsets[end - 1][1]]
            assert prompt[lo:hi].strip() in covered


class TestJobValidation:
    def test_span_must_be_a_valid_range(self):
        for bad in ((5, 3), (-1, 4), (0, 99), (2, 2)):
            with pytest.raises(SpanMappingError):
                ExtractionJob(model_id="m", prompt="w1 w2 w3", span_chars=bad)

    def test_empty_prompt_and_candidates_are_rejected(self):
        with pytest.raises(SpanMappingError):
            ExtractionJob(model_id="m", prompt="", span_chars=(0, 1))
        with pytest.raises(SpanMappingError):
            ExtractionJob(model_id="m", prompt="w1 w2", span_chars=(0, 2), candidates=("", "w3"))

    def test_generation_budget_must_be_positive(self):
        with pytest.raises(SpanMappingError):
            ExtractionJob(model_id="m", prompt="w1 w2", span_chars=(0, 2), max_new_tokens=0)


class TestLayerResolution:
    def test_last_k_includes_the_anchor(self):
        assert resolve_layers("last2", NUM_LAYERS) == (2, 3, 4)
        assert resolve_layers("last1", NUM_LAYERS) == (3, 4)

    def test_explicit_indices(self):
        assert resolve_layers((1, 3), NUM_LAYERS) == (1, 3, 4)

    def test_oversized_selector_captures_down_to_the_embedding_layer(self):
        assert resolve_layers("last99", NUM_LAYERS) == (0, 1, 2, 3, 4)


class TestScoringExtraction:
    @pytest.fixture()
    def emitted(self, runtime, checkpoint, tmp_path):
        job = ExtractionJob(
            model_id=str(checkpoint),
            prompt="w1 w2 w3 w4 w5",
            span_chars=(3, 8),
            candidates=("w7 w9", "w11"),
            layers="last2",
            out_dir=tmp_path,
        )
        return job, extract(job, runtime)

    def test_one_file_per_candidate(self, emitted):
        _, files = emitted
        assert [f.path.name for f in files] == ["p0000-c00.pigtrace", "p0000-c01.pigtrace"]
        assert all(f.path.exists() for f in files)

    def test_files_validate_against_the_trace_codec(self, emitted, runtime):
        _, files = emitted
        header, steps = read_trace_file(files[0].path)
        assert header.vocab_size == runtime.vocab_size
        assert header.layers == (2, 3, 4)
        assert header.anchor == NUM_LAYERS
        assert header.attn_layer == NUM_LAYERS
        assert header.prompt == (2, 3, 4, 5, 6)
        assert (header.span.start, header.span.end) == (1, 3)
        assert header.meta["mode"] == "scored"
        assert len(steps) == 2

    def test_forced_ids_spell_the_candidate(self, emitted, runtime):
        _, files = emitted
        for record in files:
            _, steps = read_trace_file(record.path)
            assert tuple(s.forced for s in steps) == record.tokens
            assert runtime.decode(record.tokens) == record.candidate

    def test_attention_rows_grow_by_one_per_step(self, emitted):
        _, files = emitted
        for record in files:
            header, steps = read_trace_file(record.path)
            for step in steps:
                assert len(step.attention) == len(header.prompt) + step.pos


class TestGenerationExtraction:
    def test_single_file_with_the_greedy_walk(self, runtime, checkpoint, tmp_path):
        job = ExtractionJob(
            model_id=str(checkpoint), prompt="w1 w2 w3 w4 w5", span_chars=(3, 8),
            layers="last2", max_new_tokens=5, out_dir=tmp_path,
        )
        files = extract(job, runtime)
        assert len(files) == 1
        assert files[0].path.name == "p0000-gen.pigtrace"
        header, steps = read_trace_file(files[0].path)
        assert header.meta["mode"] == "generated"
        assert tuple(s.forced for s in steps) == files[0].tokens
        assert files[0].candidate == runtime.decode(files[0].tokens)
        assert 1 <= len(steps) <= 5

    def test_generation_stops_after_the_eos_step(self, runtime, monkeypatch):
        first = runtime.capture_steps([2, 3, 4], [NUM_LAYERS], max_new_tokens=1)
        eos = first[0].next_token
        monkeypatch.setattr(runtime, "eos_token_id", eos)
        captures = runtime.capture_steps([2, 3, 4], [NUM_LAYERS], max_new_tokens=8)
        assert len(captures) == 1
        assert captures[0].next_token == eos


class TestCaptureMath:
    """Independent recomputation of the emitted tensors."""

    PROMPT_IDS = [2, 3, 4, 5, 6]

    @pytest.fixture()
    def forward(self, oracle_model):
        ids = torch.tensor([self.PROMPT_IDS])
        with torch.inference_mode():
            out = oracle_model(ids, output_hidden_states=True, output_attentions=True)
            yield oracle_model, out

    def test_anchor_logits_are_the_runtime_logits(self, runtime, forward):
        _, out = forward
        captures = runtime.capture_steps(self.PROMPT_IDS, [NUM_LAYERS], forced=[9])
        theirs = out.logits[0, -1].numpy()
        assert np.array_equal(captures[0].layer_logits[NUM_LAYERS], theirs)

    def test_early_exit_applies_the_head_after_the_final_norm(self, runtime, forward):
        model, out = forward
        captures = runtime.capture_steps(self.PROMPT_IDS, [2, NUM_LAYERS], forced=[9])
        with torch.inference_mode():
            expected = model.lm_head(
                model.transformer.ln_f(out.hidden_states[2][0, -1])
            ).numpy()
        got = captures[0].layer_logits[2]
        assert np.max(np.abs(got - expected)) <= 1e-6

    def test_attention_row_is_the_exact_head_mean(self, runtime, forward):
        _, out = forward
        captures = runtime.capture_steps(self.PROMPT_IDS, [NUM_LAYERS], forced=[9])
        per_head = out.attentions[-1][0, :, -1, :]
        expected = per_head.mean(dim=0).numpy()
        got = captures[0].attention
        assert np.max(np.abs(got - expected)) <= 1e-7
        assert got.sum() == pytest.approx(1.0, abs=1e-5)


class TestFailureHandling:
    def test_write_failure_removes_the_partial_file(
        self, runtime, checkpoint, tmp_path, monkeypatch
    ):
        def broken_write(path, header, steps):
            Path(path).write_text("half a header")
            raise OSError("disk full")

        monkeypatch.setattr(extract_module, "write_trace_file", broken_write)
        job = ExtractionJob(
            model_id=str(checkpoint), prompt="w1 w2 w3", span_chars=(0, 5),
            layers="last1", max_new_tokens=2, out_dir=tmp_path,
        )
        with pytest.raises(ExtractionError, match="partial file removed"):
            extract(job, runtime)
        assert list(tmp_path.glob("*.pigtrace")) == []

    def test_unknown_checkpoint_fails_cleanly(self, tmp_path):
        with pytest.raises(ExtractionError, match="cannot load checkpoint"):
            extract(ExtractionJob(
                model_id=str(tmp_path / "nope"), prompt="w1 w2", span_chars=(0, 2),
            ))

    def test_layer_outside_model_depth_is_rejected(self, runtime):
        with pytest.raises(ExtractionError, match="outside this checkpoint's depth"):
            runtime.capture_steps([2, 3], [NUM_LAYERS + 3], forced=[5])


class TestManifest:
    def test_records_pair_prompt_candidate_and_file(self, runtime, checkpoint, tmp_path):
        job = ExtractionJob(
            model_id=str(checkpoint), prompt="w1 w2 w3 w4", span_chars=(3, 8),
            candidates=("w5",), layers="last2", out_dir=tmp_path,
        )
        files = extract(job, runtime)
        layers = resolve_layers("last2", runtime.num_layers)
        path = write_manifest(tmp_path, runtime, files, layers)
        payload = json.loads(path.read_text())
        assert payload["inference_mode"]["dropout"] == "disabled"
        assert payload["layers"] == [2, 3, 4]
        assert payload["anchor"] == NUM_LAYERS
        record = payload["records"][0]
        assert record["prompt"] == "w1 w2 w3 w4"
        assert record["candidate"] == "w5"
        assert record["file"] == files[0].path.name
        assert (tmp_path / record["file"]).exists()


class TestDecoupling:
    def test_primary_package_never_imports_the_extractor(self):
        import pig

        package_dir = Path(pig.__file__).parent
        for source in package_dir.glob("*.py"):
            assert "pigtrace_extractor" not in source.read_text(encoding="utf-8")
