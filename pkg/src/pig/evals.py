"""Truthfulness evaluation harness: metrics, dataset loaders, benchmark.

Multiple-choice scoring takes per-candidate log probabilities and
reports:

    mc1  fraction of items whose best answer outscores every bad answer
    mc2  mean normalized probability mass on the good answers
    mc3  fraction of good answers (pooled across items) that outscore
         every bad answer of their item; per-item averaging is available
         behind a flag

QA answers use the token-bag F1 with the customary answer normalization
(lowercase, strip punctuation, drop articles, collapse whitespace).
Completion accuracy is strict top-rank: the correct continuation must
beat every distractor.
"""

from __future__ import annotations

import json
import re
import string
import time
from collections import Counter
from dataclasses import dataclass, replace
from typing import Callable, Sequence, Union

import numpy as np

from . import probcore
from .engine import PigConfig, SourceSpan, StepTrace, decode_step
from .errors import DatasetError, InvalidArgument

Candidate = Union[str, tuple[int, ...]]

LONG_INPUT_WORDS = 200


# ---------------------------------------------------------------------------
# multiple choice


@dataclass(frozen=True)
class McItem:
    """One multiple-choice item; good_queries always contains best_query."""

    best_query: Candidate
    good_queries: tuple[Candidate, ...]
    bad_queries: tuple[Candidate, ...]
    content: str | None = None

    def __post_init__(self):
        if not self.good_queries:
            raise InvalidArgument("good_queries must be non-empty")
        if not self.bad_queries:
            raise InvalidArgument("bad_queries must be non-empty")


@dataclass
class McScores:
    """Per-candidate log probabilities for one item."""

    lp_best: float
    lp_good: list[float]
    lp_bad: list[float]

    def __post_init__(self):
        if not self.lp_good or not self.lp_bad:
            raise InvalidArgument("need at least one good and one bad score")


@dataclass
class McItemResult:
    index: int
    mc1_hit: bool
    mc2_value: float
    mc3_hits: int
    good_count: int
    lp_best: float
    lp_good: list[float]
    lp_bad: list[float]


@dataclass
class McResult:
    mc1: float
    mc2: float
    mc3: float
    per_item: list[McItemResult]

    def to_dict(self) -> dict:
        return {
            "mc1": self.mc1,
            "mc2": self.mc2,
            "mc3": self.mc3,
            "items": [
                {
                    "index": r.index,
                    "mc1_hit": r.mc1_hit,
                    "mc2": r.mc2_value,
                    "mc3_hits": r.mc3_hits,
                    "good_count": r.good_count,
                    "lp_best": r.lp_best,
                    "lp_good": r.lp_good,
                    "lp_bad": r.lp_bad,
                }
                for r in self.per_item
            ],
        }


def mc_from_scores(scores: Sequence[McScores], *, mc3_per_item: bool = False) -> McResult:
    """Compute MC metrics from precomputed log probabilities.

    Comparisons are strict: a tie with the top bad answer never counts
    as a win.  mc3 pools good answers across items by default (each good
    answer is one trial); mc3_per_item averages per-item hit rates
    instead.
    """
    if not scores:
        raise InvalidArgument("need at least one scored item")
    rows: list[McItemResult] = []
    total_hits = 0
    total_good = 0
    for idx, sc in enumerate(scores):
        top_bad = max(sc.lp_bad)
        mc1_hit = sc.lp_best > top_bad
        hits = sum(1 for g in sc.lp_good if g > top_bad)
        peak = max(max(sc.lp_good), max(sc.lp_bad))
        good_mass = float(np.sum(np.exp(np.asarray(sc.lp_good) - peak)))
        bad_mass = float(np.sum(np.exp(np.asarray(sc.lp_bad) - peak)))
        mc2_value = good_mass / (good_mass + bad_mass)
        total_hits += hits
        total_good += len(sc.lp_good)
        rows.append(
            McItemResult(
                index=idx,
                mc1_hit=mc1_hit,
                mc2_value=mc2_value,
                mc3_hits=hits,
                good_count=len(sc.lp_good),
                lp_best=sc.lp_best,
                lp_good=list(sc.lp_good),
                lp_bad=list(sc.lp_bad),
            )
        )
    mc1 = sum(r.mc1_hit for r in rows) / len(rows)
    mc2 = sum(r.mc2_value for r in rows) / len(rows)
    if mc3_per_item:
        mc3 = sum(r.mc3_hits / r.good_count for r in rows) / len(rows)
    else:
        mc3 = total_hits / total_good
    return McResult(mc1=float(mc1), mc2=float(mc2), mc3=float(mc3), per_item=rows)


def mc_metrics(
    items: Sequence[McItem],
    scorer: Callable[[Candidate], float],
    *,
    mc3_per_item: bool = False,
) -> McResult:
    """Score every candidate with scorer, then compute MC metrics."""
    if not items:
        raise InvalidArgument("need at least one item")
    scored = [
        McScores(
            lp_best=float(scorer(item.best_query)),
            lp_good=[float(scorer(g)) for g in item.good_queries],
            lp_bad=[float(scorer(b)) for b in item.bad_queries],
        )
        for item in items
    ]
    return mc_from_scores(scored, mc3_per_item=mc3_per_item)


# ---------------------------------------------------------------------------
# QA answer F1


_PUNCT = set(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(text: str, *, strip_articles: bool = True) -> str:
    """Lowercase, strip punctuation, optionally drop articles, fix spaces."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    if strip_articles:
        text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def _bag_f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if len(pred_tokens) == 0 or len(gold_tokens) == 0:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def squad_f1(prediction: str, golds: Sequence[str] | str, *, strip_articles: bool = True) -> float:
    """Best token-bag F1 of prediction against any gold answer."""
    if isinstance(golds, str):
        golds = [golds]
    if not golds:
        raise InvalidArgument("need at least one gold answer")
    pred_tokens = normalize_answer(prediction, strip_articles=strip_articles).split()
    return max(
        _bag_f1(pred_tokens, normalize_answer(g, strip_articles=strip_articles).split())
        for g in golds
    )


# ---------------------------------------------------------------------------
# completion ranking


@dataclass(frozen=True)
class FactorItem:
    """A prefix with one correct completion among distractors."""

    completions: tuple[Candidate, ...]
    correct_index: int
    prefix: str | None = None

    def __post_init__(self):
        if len(self.completions) < 2:
            raise InvalidArgument("need the correct completion plus at least one distractor")
        if not (0 <= self.correct_index < len(self.completions)):
            raise InvalidArgument(
                f"correct_index {self.correct_index} outside [0, {len(self.completions)})"
            )


@dataclass
class FactorItemResult:
    index: int
    hit: bool
    lp: list[float]
    correct_index: int


def factor_details(
    items: Sequence[FactorItem], scorer: Callable[[Candidate], float]
) -> tuple[float, list[FactorItemResult]]:
    """Strict top-rank accuracy plus per-item scores."""
    if not items:
        raise InvalidArgument("need at least one item")
    rows = []
    for idx, item in enumerate(items):
        lp = [float(scorer(c)) for c in item.completions]
        correct = lp[item.correct_index]
        others = [v for k, v in enumerate(lp) if k != item.correct_index]
        rows.append(
            FactorItemResult(
                index=idx, hit=correct > max(others), lp=lp, correct_index=item.correct_index
            )
        )
    accuracy = sum(r.hit for r in rows) / len(rows)
    return float(accuracy), rows


def factor_accuracy(items: Sequence[FactorItem], scorer: Callable[[Candidate], float]) -> float:
    accuracy, _ = factor_details(items, scorer)
    return accuracy


def factor_from_scores(score_rows: Sequence[Sequence[float]], correct_indices: Sequence[int]) -> float:
    """Accuracy from precomputed per-completion log probabilities."""
    if len(score_rows) != len(correct_indices):
        raise InvalidArgument("score rows and correct indices differ in length")
    items = []
    for lp, correct in zip(score_rows, correct_indices):
        lp = list(lp)
        if not (0 <= correct < len(lp)) or len(lp) < 2:
            raise InvalidArgument(f"bad completion row: {lp!r} with correct index {correct}")
        items.append((lp, correct))
    hits = sum(lp[c] > max(v for k, v in enumerate(lp) if k != c) for lp, c in items)
    return hits / len(items)


# ---------------------------------------------------------------------------
# dataset loaders (JSON lines)


@dataclass(frozen=True)
class QaItem:
    context: str
    question: str
    answers: tuple[str, ...]
    length_class: str

    def __post_init__(self):
        if not self.answers:
            raise InvalidArgument("answers must be non-empty")
        if self.length_class not in ("short", "long"):
            raise InvalidArgument(f"length_class must be short or long, got {self.length_class!r}")


def _iter_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"not valid JSON: {exc}", line=lineno) from None


def _require(obj: dict, key: str, lineno: int):
    if not isinstance(obj, dict):
        raise DatasetError("record is not a JSON object", line=lineno)
    if key not in obj:
        raise DatasetError("missing required field", line=lineno, field=key)
    return obj[key]


def _parse_candidate(value, lineno: int, field_name: str) -> Candidate:
    if isinstance(value, str):
        if not value:
            raise DatasetError("candidate text is empty", line=lineno, field=field_name)
        return value
    if isinstance(value, list) and all(
        isinstance(t, int) and not isinstance(t, bool) for t in value
    ):
        return tuple(value)
    raise DatasetError(
        "candidate must be a string or a list of token ids", line=lineno, field=field_name
    )


def _parse_candidate_list(value, lineno: int, field_name: str) -> list[Candidate]:
    if not isinstance(value, list):
        raise DatasetError("expected a list of candidates", line=lineno, field=field_name)
    return [_parse_candidate(v, lineno, field_name) for v in value]


def load_mc_dataset(path) -> tuple[list[McItem], dict]:
    """Load multiple-choice items.

    Files may list the best answer inside good_queries or keep the two
    disjoint; loading normalizes to the convention that good_queries
    contains the best answer exactly once, and reports how many records
    needed the insertion.
    """
    items: list[McItem] = []
    inserted_flags: list[bool] = []
    for lineno, obj in _iter_jsonl(path):
        best = _parse_candidate(_require(obj, "best_query", lineno), lineno, "best_query")
        goods = _parse_candidate_list(_require(obj, "good_queries", lineno), lineno, "good_queries")
        bads = _parse_candidate_list(_require(obj, "bad_queries", lineno), lineno, "bad_queries")
        if not bads:
            raise DatasetError("bad_queries must be non-empty", line=lineno, field="bad_queries")
        if goods.count(best) > 1:
            raise DatasetError(
                "best_query appears multiple times in good_queries",
                line=lineno,
                field="good_queries",
            )
        inserted = best not in goods
        if inserted:
            goods = [best] + goods
        inserted_flags.append(inserted)
        content = obj.get("content")
        if content is not None and not isinstance(content, str):
            raise DatasetError("content must be a string", line=lineno, field="content")
        try:
            items.append(
                McItem(
                    best_query=best,
                    good_queries=tuple(goods),
                    bad_queries=tuple(bads),
                    content=content,
                )
            )
        except InvalidArgument as exc:
            raise DatasetError(str(exc), line=lineno) from None
    if not items:
        raise DatasetError(f"no items in {path}")
    info = {
        "items": len(items),
        "best_inserted_into_good": sum(inserted_flags),
        "inserted_flags": inserted_flags,
    }
    return items, info


def load_qa_dataset(path) -> list[QaItem]:
    """Load QA items; inputs longer than 200 words are classed long."""
    items: list[QaItem] = []
    for lineno, obj in _iter_jsonl(path):
        context = _require(obj, "context", lineno)
        question = _require(obj, "question", lineno)
        answers = _require(obj, "answers", lineno)
        if not isinstance(context, str):
            raise DatasetError("context must be a string", line=lineno, field="context")
        if not isinstance(question, str):
            raise DatasetError("question must be a string", line=lineno, field="question")
        if not isinstance(answers, list) or not answers or not all(
            isinstance(a, str) for a in answers
        ):
            raise DatasetError(
                "answers must be a non-empty list of strings", line=lineno, field="answers"
            )
        length_class = "long" if len(context.split()) > LONG_INPUT_WORDS else "short"
        items.append(
            QaItem(
                context=context,
                question=question,
                answers=tuple(answers),
                length_class=length_class,
            )
        )
    if not items:
        raise DatasetError(f"no items in {path}")
    return items


def load_factor_dataset(path) -> list[FactorItem]:
    items: list[FactorItem] = []
    for lineno, obj in _iter_jsonl(path):
        completions = _parse_candidate_list(
            _require(obj, "completions", lineno), lineno, "completions"
        )
        correct = _require(obj, "correct_index", lineno)
        if isinstance(correct, bool) or not isinstance(correct, int):
            raise DatasetError("correct_index must be an integer", line=lineno, field="correct_index")
        prefix = obj.get("prefix")
        if prefix is not None and not isinstance(prefix, str):
            raise DatasetError("prefix must be a string", line=lineno, field="prefix")
        try:
            items.append(
                FactorItem(completions=tuple(completions), correct_index=correct, prefix=prefix)
            )
        except InvalidArgument as exc:
            raise DatasetError(str(exc), line=lineno) from None
    if not items:
        raise DatasetError(f"no items in {path}")
    return items


def load_predictions(path) -> list[str]:
    """Load prediction lines ({"prediction": "..."}), aligned by order."""
    preds: list[str] = []
    for lineno, obj in _iter_jsonl(path):
        value = _require(obj, "prediction", lineno)
        if not isinstance(value, str):
            raise DatasetError("prediction must be a string", line=lineno, field="prediction")
        preds.append(value)
    return preds


def qa_f1_report(
    items: Sequence[QaItem], predictions: Sequence[str], *, strip_articles: bool = True
) -> dict:
    """Mean answer F1 overall and split by input length class."""
    if len(items) != len(predictions):
        raise InvalidArgument(f"{len(predictions)} predictions for {len(items)} items")
    if not items:
        raise InvalidArgument("need at least one item")
    per_item = []
    for idx, (item, pred) in enumerate(zip(items, predictions)):
        value = squad_f1(pred, item.answers, strip_articles=strip_articles)
        per_item.append({"index": idx, "f1": value, "length_class": item.length_class})
    def _mean(rows):
        return float(np.mean([r["f1"] for r in rows])) if rows else None
    short_rows = [r for r in per_item if r["length_class"] == "short"]
    long_rows = [r for r in per_item if r["length_class"] == "long"]
    return {
        "f1": _mean(per_item),
        "f1_short": _mean(short_rows),
        "f1_long": _mean(long_rows),
        "count": len(per_item),
        "count_short": len(short_rows),
        "count_long": len(long_rows),
        "items": per_item,
    }


# ---------------------------------------------------------------------------
# latency benchmark


@dataclass
class BenchReport:
    vocab_size: int
    candidate_layers: int
    repetitions: int
    median_ms: float
    p99_ms: float
    mean_ms: float
    wall_s: float
    baseline_median_ms: float
    ratio_vs_baseline: float
    gate_saturation: float

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "candidate_layers": self.candidate_layers,
            "repetitions": self.repetitions,
            "median_ms": self.median_ms,
            "p99_ms": self.p99_ms,
            "mean_ms": self.mean_ms,
            "wall_s": self.wall_s,
            "baseline_median_ms": self.baseline_median_ms,
            "ratio_vs_baseline": self.ratio_vs_baseline,
            "gate_saturation": self.gate_saturation,
        }


def bench_step(
    config: PigConfig, vocab_size: int, layer_count: int, repetitions: int
) -> BenchReport:
    """Time the generation-path decode_step against a plain anchor softmax.

    layer_count is the number of early-exit layers |J|; the anchor sits
    one above them.  Traces are pregenerated outside the timed region.
    The timed call is decode_step(..., detail=False) — the variant the
    generation and scoring loops use — so the gate may stop scanning
    layers once the clip is guaranteed; gate_saturation reports the
    fraction of steps where the gate sat at clip_max so that readers can
    tell how often that shortcut applied.
    """
    if repetitions < 100:
        raise InvalidArgument(f"need at least 100 repetitions, got {repetitions}")
    if vocab_size < 2:
        raise InvalidArgument(f"vocab_size must be >= 2, got {vocab_size}")
    if layer_count < 1:
        raise InvalidArgument(f"layer_count must be >= 1, got {layer_count}")
    anchor = layer_count
    bench_config = replace(
        config,
        anchor_layer=anchor,
        layer_set=tuple(range(layer_count)),
        attention_layer=anchor,
    )
    rng = np.random.default_rng(config.seed)
    context_len = 128
    span = SourceSpan(0, 64)
    pool = []
    for _ in range(8):
        context = tuple(int(t) for t in rng.integers(0, vocab_size, context_len))
        attn = rng.random(context_len) + 1e-3
        logits = {
            j: rng.normal(0.0, 1.0, vocab_size).astype(np.float32) for j in range(layer_count + 1)
        }
        pool.append(StepTrace(context, span, logits, attn))
    for trace in pool[:3]:
        decode_step(trace, bench_config, detail=False)

    times = np.empty(repetitions)
    saturated = 0
    wall_start = time.perf_counter()
    for i in range(repetitions):
        trace = pool[i % len(pool)]
        t0 = time.perf_counter()
        _, diag = decode_step(trace, bench_config, detail=False)
        times[i] = time.perf_counter() - t0
        if diag.p_cp >= bench_config.clip_max:
            saturated += 1
    wall = time.perf_counter() - wall_start

    base_times = np.empty(repetitions)
    for i in range(repetitions):
        trace = pool[i % len(pool)]
        t0 = time.perf_counter()
        probcore.softmax(
            np.asarray(trace.layer_logits[anchor], dtype=np.float64), bench_config.temperature
        )
        base_times[i] = time.perf_counter() - t0

    median = float(np.median(times))
    base_median = float(np.median(base_times))
    return BenchReport(
        vocab_size=vocab_size,
        candidate_layers=layer_count,
        repetitions=repetitions,
        median_ms=median * 1e3,
        p99_ms=float(np.percentile(times, 99)) * 1e3,
        mean_ms=float(np.mean(times)) * 1e3,
        wall_s=wall,
        baseline_median_ms=base_median * 1e3,
        ratio_vs_baseline=median / base_median if base_median > 0 else float("inf"),
        gate_saturation=saturated / repetitions,
    )
