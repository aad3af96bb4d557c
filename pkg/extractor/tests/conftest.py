"""Shared pytest wiring: checkpoint fixture and criterion reporting.

Tests marked @pytest.mark.criterion("...") get one [PASS]/[FAIL] line
per criterion in the terminal summary.  The checkpoint fixture builds a
deterministic four-layer causal LM with a whitespace word tokenizer
("w0" .. "w62" plus "<unk>", which doubles as the end-of-sequence
token) so every test runs hermetically.
"""

import pytest
import torch
from tokenizers import Tokenizer, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

from pigtrace_extractor import CheckpointRuntime

WORDS = ["<unk>"] + [f"w{i}" for i in range(63)]
NUM_LAYERS = 4


def build_checkpoint(path) -> None:
    torch.manual_seed(20240814)
    config = GPT2Config(
        vocab_size=len(WORDS),
        n_positions=128,
        n_embd=32,
        n_layer=NUM_LAYERS,
        n_head=4,
        bos_token_id=0,
        eos_token_id=0,
    )
    GPT2LMHeadModel(config).save_pretrained(path)
    vocab = {word: i for i, word in enumerate(WORDS)}
    tokenizer = Tokenizer(models.WordLevel(vocab, unk_token="<unk>"))
    tokenizer.pre_tokenizer = pre_tokenizers.Whitespace()
    PreTrainedTokenizerFast(
        tokenizer_object=tokenizer, unk_token="<unk>", eos_token="<unk>", pad_token="<unk>"
    ).save_pretrained(path)


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("checkpoint") / "tiny"
    build_checkpoint(path)
    return path


@pytest.fixture(scope="session")
def runtime(checkpoint):
    return CheckpointRuntime(checkpoint)


@pytest.fixture(scope="session")
def oracle_model(checkpoint):
    """An independently loaded copy of the checkpoint for runtime oracles."""
    model = GPT2LMHeadModel.from_pretrained(checkpoint, attn_implementation="eager")
    return model.eval()


def word_prompt(rng, length: int) -> str:
    return " ".join(f"w{int(i)}" for i in rng.integers(0, 63, length))


def char_span_of_words(prompt: str, first: int, last: int) -> tuple[int, int]:
    """Character range covering words [first, last] of a space-joined prompt."""
    words = prompt.split(" ")
    start = sum(len(w) + 1 for w in words[:first])
    end = start + len(" ".join(words[first:last + 1]))
    return start, end


# -- criterion reporting ----------------------------------------------

_criteria_by_node: dict[str, str] = {}
_order: list[str] = []
_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(name): acceptance criterion reported in the terminal summary"
    )


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            label = str(marker.args[0])
            _criteria_by_node[item.nodeid] = label
            if label not in _order:
                _order.append(label)


def pytest_runtest_logreport(report):
    label = _criteria_by_node.get(report.nodeid)
    if label is None:
        return
    if report.when == "call":
        outcome = "PASS" if report.passed else "FAIL"
        # Never upgrade a FAIL (parametrized criteria share one label).
        if _outcomes.get(label) != "FAIL":
            _outcomes[label] = outcome
    elif report.failed:
        _outcomes[label] = "FAIL"
    elif report.when == "setup" and report.skipped and _outcomes.get(label) != "FAIL":
        _outcomes.setdefault(label, "SKIP")


def pytest_terminal_summary(terminalreporter):
    if not _order or not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for label in _order:
        outcome = _outcomes.get(label, "FAIL")
        terminalreporter.write_line(f"[{outcome}] {label}")
