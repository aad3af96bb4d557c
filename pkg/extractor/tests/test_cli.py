"""End-to-end tests for the command line interface."""

import json

import pytest

from pig import read_trace_file
from pigtrace_extractor.cli import run


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


@pytest.fixture()
def prompt_file(tmp_path):
    path = tmp_path / "prompts.jsonl"
    write_jsonl(path, [
        {"prompt": "w1 w2 w3 w4 w5", "span": [3, 8], "candidates": ["w7 w9", "w11"]},
        {"prompt": "w9 w8 w7 w6", "span": [0, 5]},
        {"prompt": "w2 w4 w6"},
    ])
    return path


class TestExtractCommand:
    def test_emits_traces_and_manifest(self, checkpoint, prompt_file, tmp_path, capsys):
        out_dir = tmp_path / "out"
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompt_file),
            "--span", "0:5", "--layers", "last2", "--max-new-tokens", "3",
            "--out", str(out_dir),
        ])
        assert code == 0
        names = sorted(p.name for p in out_dir.glob("*.pigtrace"))
        assert names == [
            "p0000-c00.pigtrace", "p0000-c01.pigtrace",
            "p0001-gen.pigtrace", "p0002-gen.pigtrace",
        ]
        manifest = json.loads((out_dir / "manifest.json").read_text())
        assert len(manifest["records"]) == 4
        assert manifest["inference_mode"]["dropout"] == "disabled"
        assert {r["file"] for r in manifest["records"]} == set(names)
        # every emitted file loads through the trace codec
        for name in names:
            header, steps = read_trace_file(out_dir / name)
            assert header.anchor in header.layers
            assert steps
        assert "wrote 4 trace(s) for 3 prompt(s)" in capsys.readouterr().err

    def test_explicit_layer_list(self, checkpoint, tmp_path):
        prompts = tmp_path / "p.jsonl"
        write_jsonl(prompts, [{"prompt": "w1 w2 w3", "span": [0, 5]}])
        out_dir = tmp_path / "out"
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--layers", "1,3", "--max-new-tokens", "2", "--out", str(out_dir),
        ])
        assert code == 0
        header, _ = read_trace_file(out_dir / "p0000-gen.pigtrace")
        assert header.layers == (1, 3, 4)


class TestBadUsage:
    def test_missing_span_everywhere(self, checkpoint, tmp_path, capsys):
        prompts = tmp_path / "p.jsonl"
        write_jsonl(prompts, [{"prompt": "w1 w2"}])
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "no 'span' field and no --span fallback" in capsys.readouterr().err

    def test_bad_span_format(self, checkpoint, tmp_path, capsys):
        prompts = tmp_path / "p.jsonl"
        write_jsonl(prompts, [{"prompt": "w1 w2"}])
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--span", "zero-five", "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "expected LO:HI" in capsys.readouterr().err

    def test_bad_json_line_reports_the_line(self, checkpoint, tmp_path, capsys):
        prompts = tmp_path / "p.jsonl"
        prompts.write_text('{"prompt": "w1 w2", "span": [0, 5]}\nnot json\n')
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "line 2" in capsys.readouterr().err

    def test_empty_prompt_file(self, checkpoint, tmp_path, capsys):
        prompts = tmp_path / "p.jsonl"
        prompts.write_text("\n")
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "no prompts" in capsys.readouterr().err

    def test_span_that_covers_no_tokens(self, checkpoint, tmp_path, capsys):
        prompts = tmp_path / "p.jsonl"
        write_jsonl(prompts, [{"prompt": "w1 w2", "span": [2, 3]}])
        code = run([
            "--model", str(checkpoint), "--prompt-file", str(prompts),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 1
        assert "covers no tokens" in capsys.readouterr().err
