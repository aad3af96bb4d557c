"""Command line entry point.

Subcommands: decode, score, eval-mc, eval-f1, eval-factor, trace-synth,
bench.  Exit codes: 0 success, 1 for bad usage or malformed input
(message names the offending field and line where known), 2 for
internal failures.  Set PIG_LOG=debug|info|warning|error to control log
verbosity.  A JSON --config file supplies defaults that explicit flags
override.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import evals, reporting
from .backend import TraceHeader, TraceSession, TraceStep, SyntheticSpec, read_trace_file, synth_trace, write_trace_file
from .decoder import SamplingParams, generate, score_sequence, score_steps
from .engine import AGGREGATORS, PigConfig, expand_layer_selector
from .errors import DatasetError, PigError, UsageError

log = logging.getLogger("pig.cli")

_DEFAULTS: dict[str, Any] = {
    "alpha": "500",
    "agg": "max",
    "layers": "last8",
    "attn_layer": None,
    "clip": 0.5,
    "temperature": 1.0,
    "token_filter": None,
    "token_filter_file": None,
    "seed": 0,
    "mode": "greedy",
    "max_new_tokens": 256,
    "stop_tokens": None,
    "jobs": 1,
    "select_metric": "mc2",
    "mc3_per_item": False,
    "keep_articles": False,
}

_CONFIG_KEYS = set(_DEFAULTS)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common_flags(parser: _Parser) -> None:
    parser.add_argument("--config", default=None, help="JSON file with default settings")
    parser.add_argument("--out", default=None, help="write the JSON report here")
    parser.add_argument("--seed", type=int, default=None)


def _add_step_flags(parser: _Parser) -> None:
    parser.add_argument("--alpha", default=None, help="gate scale; comma list sweeps a grid")
    parser.add_argument("--agg", choices=AGGREGATORS, default=None)
    parser.add_argument("--layers", default=None, help="'last8', 'last16:even', or '3,5,7'")
    parser.add_argument("--attn-layer", type=int, default=None, dest="attn_layer")
    parser.add_argument("--clip", type=float, default=None)
    parser.add_argument("--temperature", type=float, default=None)
    parser.add_argument("--token-filter", default=None, dest="token_filter",
                        help="comma-separated token ids dropped from the span")
    parser.add_argument("--token-filter-file", default=None, dest="token_filter_file",
                        help="file with one token id per line")


def _load_config_file(path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(payload, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    for key in payload:
        if key not in _CONFIG_KEYS:
            raise UsageError(f"config file {path} has unknown key {key!r}")
    return payload


def _merge_settings(args: argparse.Namespace) -> dict[str, Any]:
    settings = dict(_DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        settings.update(_load_config_file(config_path))
    for key in _CONFIG_KEYS:
        value = getattr(args, key, None)
        if value is not None and value is not False:
            settings[key] = value
    return settings


def _parse_int_list(text: str, what: str) -> list[int]:
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(int(part))
        except ValueError:
            raise UsageError(f"bad {what} entry {part!r}: expected an integer") from None
    return out


def _parse_alpha_grid(value) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)]
    grid = []
    for part in str(value).split(","):
        part = part.strip()
        if not part:
            continue
        try:
            grid.append(float(part))
        except ValueError:
            raise UsageError(f"bad --alpha entry {part!r}: expected a number") from None
    if not grid:
        raise UsageError("--alpha selects no values")
    return grid


def _single_alpha(settings) -> float:
    grid = _parse_alpha_grid(settings["alpha"])
    if len(grid) != 1:
        raise UsageError("this subcommand takes a single --alpha value")
    return grid[0]


def _token_filter(settings) -> frozenset[int] | None:
    ids: list[int] = []
    if settings["token_filter"]:
        ids.extend(_parse_int_list(settings["token_filter"], "--token-filter"))
    if settings["token_filter_file"]:
        path = settings["token_filter_file"]
        try:
            with open(path, "r", encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        ids.append(int(line))
                    except ValueError:
                        raise DatasetError(
                            "expected one token id per line", line=lineno, field="token_filter_file"
                        ) from None
        except OSError as exc:
            raise UsageError(f"cannot read token filter file {path}: {exc}") from None
    return frozenset(ids) if ids else None


def _build_config(settings, header: TraceHeader, alpha: float) -> PigConfig:
    layers_arg: Any = settings["layers"]
    if isinstance(layers_arg, str) and not layers_arg.startswith("last"):
        layers_arg = _parse_int_list(layers_arg, "--layers")
    layer_set = expand_layer_selector(layers_arg, header.anchor, available=header.layers)
    attn_layer = settings["attn_layer"]
    return PigConfig(
        anchor_layer=header.anchor,
        layer_set=layer_set,
        alpha=alpha,
        clip_max=float(settings["clip"]),
        aggregator=settings["agg"],
        attention_layer=int(attn_layer) if attn_layer is not None else header.attn_layer,
        token_filter=_token_filter(settings),
        temperature=float(settings["temperature"]),
        seed=int(settings["seed"]),
    )


def _fingerprint(subcommand: str, settings, inputs: dict[str, Any]) -> tuple[str, dict[str, Any]]:
    payload = {
        "subcommand": subcommand,
        "settings": {k: v for k, v in settings.items() if k in _CONFIG_KEYS},
        "inputs": inputs,
    }
    return reporting.config_fingerprint(payload), payload


def _emit(args, payload) -> None:
    if args.out:
        reporting.atomic_write_json(args.out, payload)
        log.info("wrote report to %s", args.out)
    else:
        print(json.dumps(payload, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_decode(args) -> int:
    settings = _merge_settings(args)
    alpha = _single_alpha(settings)
    session = TraceSession.from_file(args.trace)
    config = _build_config(settings, session.header, alpha)
    stop_tokens = frozenset(
        _parse_int_list(settings["stop_tokens"], "--stop-tokens") if settings["stop_tokens"] else []
    )
    params = SamplingParams(
        mode=settings["mode"],
        temperature=float(settings["temperature"]),
        max_new_tokens=int(settings["max_new_tokens"]),
        stop_tokens=stop_tokens,
        seed=int(settings["seed"]),
    )
    result = generate(session, config, params)
    fingerprint, _ = _fingerprint("decode", settings, {"trace": str(args.trace)})
    _emit(args, {
        "fingerprint": fingerprint,
        "trace": str(args.trace),
        "tokens": result.tokens,
        "p_cp": result.p_cp,
        "token_prob": result.token_prob,
        "stop_reason": result.stop_reason,
    })
    return 0


def _cmd_score(args) -> int:
    settings = _merge_settings(args)
    alpha = _single_alpha(settings)
    session = TraceSession.from_file(args.trace)
    config = _build_config(settings, session.header, alpha)
    if args.tokens:
        candidate = _parse_int_list(args.tokens, "--tokens")
    else:
        candidate = list(session.recorded_tokens())
    scores = score_steps(session, candidate, config)
    total = float(sum(s.log_prob for s in scores))
    fingerprint, _ = _fingerprint("score", settings, {"trace": str(args.trace)})
    _emit(args, {
        "fingerprint": fingerprint,
        "trace": str(args.trace),
        "tokens": candidate,
        "total_log_prob": total,
        "per_token": [
            {"token": s.token, "log_prob": s.log_prob, "p_cp": s.diagnostics.p_cp}
            for s in scores
        ],
    })
    return 0


def _scan_trace_dir(directory) -> dict[tuple[int, str, int], tuple[TraceHeader, list[TraceStep]]]:
    root = Path(directory)
    if not root.is_dir():
        raise UsageError(f"trace directory {directory} does not exist")
    catalog: dict[tuple[int, str, int], tuple[TraceHeader, list[TraceStep]]] = {}
    paths = sorted(root.glob("*.pigtrace"))
    if not paths:
        raise UsageError(f"no .pigtrace files under {directory}")
    for path in paths:
        header, steps = read_trace_file(path)
        meta = header.meta
        item = meta.get("item")
        role = meta.get("role")
        index = meta.get("index", 0)
        if not isinstance(item, int) or isinstance(item, bool):
            raise DatasetError(f"{path.name}: meta.item must be an integer", field="item")
        if role not in ("best", "good", "bad", "completion"):
            raise DatasetError(f"{path.name}: meta.role {role!r} is not a known role", field="role")
        if not isinstance(index, int) or isinstance(index, bool):
            raise DatasetError(f"{path.name}: meta.index must be an integer", field="index")
        key = (item, role, index)
        if key in catalog:
            raise DatasetError(f"{path.name}: duplicate trace for item {item} {role}[{index}]", field="meta")
        catalog[key] = (header, steps)
    return catalog


def _score_catalog(catalog, settings, alphas, jobs: int) -> dict[float, dict[tuple[int, str, int], float]]:
    """Score every cataloged trace at every alpha."""
    keys = sorted(catalog)
    out: dict[float, dict[tuple[int, str, int], float]] = {}
    for alpha in alphas:
        def _one(key):
            header, steps = catalog[key]
            config = _build_config(settings, header, alpha)
            session = TraceSession(header, steps)
            candidate = session.recorded_tokens()
            return key, score_sequence(session, candidate, config)
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                pairs = list(pool.map(_one, keys))
        else:
            pairs = [_one(k) for k in keys]
        out[alpha] = dict(pairs)
    return out


def _need(lp: dict, key: tuple[int, str, int]) -> float:
    if key not in lp:
        raise DatasetError(f"missing trace for item {key[0]} {key[1]}[{key[2]}]", field="item")
    return lp[key]


def _mc_scores_for_items(items, inserted_flags, lp: dict[tuple[int, str, int], float]) -> list[evals.McScores]:
    scored = []
    for i, (item, inserted) in enumerate(zip(items, inserted_flags)):
        lp_best = _need(lp, (i, "best", 0))
        file_good_count = len(item.good_queries) - (1 if inserted else 0)
        lp_good = [_need(lp, (i, "good", k)) for k in range(file_good_count)]
        if inserted:
            lp_good = [lp_best] + lp_good
        lp_bad = [_need(lp, (i, "bad", k)) for k in range(len(item.bad_queries))]
        scored.append(evals.McScores(lp_best=lp_best, lp_good=lp_good, lp_bad=lp_bad))
    return scored


def _cmd_eval_mc(args) -> int:
    settings = _merge_settings(args)
    alphas = _parse_alpha_grid(settings["alpha"])
    items, info = evals.load_mc_dataset(args.data)
    inserted_flags = info["inserted_flags"]
    catalog = _scan_trace_dir(args.trace_dir)
    log.info("scoring %d traces at %d alpha value(s)", len(catalog), len(alphas))
    lp_by_alpha = _score_catalog(catalog, settings, alphas, int(settings["jobs"]))
    mc3_per_item = bool(settings["mc3_per_item"])

    results = {}
    for alpha in alphas:
        scored = _mc_scores_for_items(items, inserted_flags, lp_by_alpha[alpha])
        results[_alpha_key(alpha)] = evals.mc_from_scores(scored, mc3_per_item=mc3_per_item).to_dict()

    payload: dict[str, Any] = {}
    if args.folds:
        payload["folds"] = _two_fold(items, inserted_flags, lp_by_alpha, alphas, settings, args)
    fingerprint, _ = _fingerprint("eval-mc", settings, {
        "data": str(args.data), "trace_dir": str(args.trace_dir),
        "folds": args.folds, "fold_seed": args.fold_seed,
    })
    payload.update({
        "fingerprint": fingerprint,
        "dataset": {"items": info["items"], "best_inserted_into_good": info["best_inserted_into_good"]},
        "results": results,
    })
    _emit(args, payload)
    return 0


def _alpha_key(alpha: float) -> str:
    return format(alpha, "g")


def _two_fold(items, inserted_flags, lp_by_alpha, alphas, settings, args) -> dict:
    """Cross-validated alpha selection: pick the best alpha on the other
    fold, apply it to this one, and pool the per-item outcomes."""
    folds = int(args.folds)
    if folds < 2:
        raise UsageError("--folds must be >= 2")
    if len(items) < folds:
        raise UsageError(f"cannot split {len(items)} items into {folds} folds")
    metric = settings["select_metric"]
    if metric not in ("mc1", "mc2", "mc3"):
        raise UsageError(f"--select-metric must be mc1, mc2, or mc3, got {metric!r}")
    rng = np.random.default_rng(int(args.fold_seed))
    order = rng.permutation(len(items))
    assignment = [int(order[i]) % folds for i in range(len(items))]
    fold_members = [[i for i in range(len(items)) if assignment[i] == f] for f in range(folds)]

    def _metric_on(member_ids, alpha):
        subset_items = [items[i] for i in member_ids]
        subset_flags = [inserted_flags[i] for i in member_ids]
        lp = lp_by_alpha[alpha]
        scoped = {}
        for local, i in enumerate(member_ids):
            for (item_id, role, k), v in lp.items():
                if item_id == i:
                    scoped[(local, role, k)] = v
        scored = _mc_scores_for_items(subset_items, subset_flags, scoped)
        result = evals.mc_from_scores(scored, mc3_per_item=bool(settings["mc3_per_item"]))
        return getattr(result, metric)

    fold_rows = []
    pooled_scores: list[evals.McScores] = []
    for f in range(folds):
        held_out = fold_members[f]
        train = [i for i in range(len(items)) if assignment[i] != f]
        best_alpha = max(alphas, key=lambda a: _metric_on(train, a))
        fold_rows.append({
            "fold": f,
            "chosen_alpha": best_alpha,
            "train_items": len(train),
            "held_out_items": len(held_out),
            "held_out_" + metric: _metric_on(held_out, best_alpha),
        })
        lp = lp_by_alpha[best_alpha]
        scoped = {}
        for local, i in enumerate(held_out):
            for (item_id, role, k), v in lp.items():
                if item_id == i:
                    scoped[(local, role, k)] = v
        pooled_scores.extend(
            _mc_scores_for_items(
                [items[i] for i in held_out], [inserted_flags[i] for i in held_out], scoped
            )
        )
    pooled = evals.mc_from_scores(pooled_scores, mc3_per_item=bool(settings["mc3_per_item"]))
    return {
        "fold_seed": int(args.fold_seed),
        "select_metric": metric,
        "per_fold": fold_rows,
        "pooled": pooled.to_dict(),
    }


def _cmd_eval_factor(args) -> int:
    settings = _merge_settings(args)
    alphas = _parse_alpha_grid(settings["alpha"])
    items = evals.load_factor_dataset(args.data)
    catalog = _scan_trace_dir(args.trace_dir)
    lp_by_alpha = _score_catalog(catalog, settings, alphas, int(settings["jobs"]))
    results = {}
    for alpha in alphas:
        lp = lp_by_alpha[alpha]
        rows = []
        for i, item in enumerate(items):
            row = [_need(lp, (i, "completion", k)) for k in range(len(item.completions))]
            rows.append(row)
        accuracy = evals.factor_from_scores(rows, [item.correct_index for item in items])
        results[_alpha_key(alpha)] = {
            "accuracy": accuracy,
            "items": [
                {"index": i, "lp": rows[i], "correct_index": items[i].correct_index}
                for i in range(len(items))
            ],
        }
    fingerprint, _ = _fingerprint("eval-factor", settings, {
        "data": str(args.data), "trace_dir": str(args.trace_dir),
    })
    _emit(args, {"fingerprint": fingerprint, "results": results})
    return 0


def _cmd_eval_f1(args) -> int:
    settings = _merge_settings(args)
    items = evals.load_qa_dataset(args.data)
    predictions = evals.load_predictions(args.pred)
    report = evals.qa_f1_report(items, predictions, strip_articles=not settings["keep_articles"])
    fingerprint, _ = _fingerprint("eval-f1", settings, {
        "data": str(args.data), "pred": str(args.pred),
    })
    _emit(args, {"fingerprint": fingerprint, **report})
    return 0


def _cmd_trace_synth(args) -> int:
    settings = _merge_settings(args)
    plan = tuple(p.strip() for p in args.steps.split(",") if p.strip())
    spec = SyntheticSpec(
        seed=int(settings["seed"]),
        vocab_size=int(args.vocab),
        num_layers=int(args.num_layers),
        steps=plan,
        span_tokens=tuple(_parse_int_list(args.span_tokens, "--span-tokens")),
        prefix_tokens=tuple(_parse_int_list(args.prefix_tokens, "--prefix-tokens") if args.prefix_tokens else []),
        suffix_tokens=tuple(_parse_int_list(args.suffix_tokens, "--suffix-tokens") if args.suffix_tokens else []),
        divergence_boost=float(args.boost),
    )
    header, steps = synth_trace(spec)
    write_trace_file(args.out, header, steps)
    log.info("wrote synthetic trace with %d steps to %s", len(steps), args.out)
    print(json.dumps({
        "out": str(args.out),
        "steps": len(steps),
        "vocab": spec.vocab_size,
        "layers": spec.num_layers,
    }, sort_keys=True))
    return 0


def _cmd_bench(args) -> int:
    settings = _merge_settings(args)
    alpha = _single_alpha(settings)
    base = PigConfig(
        anchor_layer=1,
        layer_set=(0,),
        alpha=alpha,
        clip_max=float(settings["clip"]),
        aggregator=settings["agg"],
        temperature=float(settings["temperature"]),
        seed=int(settings["seed"]),
    )
    report = evals.bench_step(base, int(args.vocab), int(args.jsd_layers), int(args.reps))
    fingerprint, _ = _fingerprint("bench", settings, {
        "vocab": int(args.vocab), "jsd_layers": int(args.jsd_layers), "reps": int(args.reps),
    })
    payload = {"fingerprint": fingerprint, **report.to_dict()}
    print(
        f"decode_step median {report.median_ms:.3f} ms over {report.repetitions} reps "
        f"(x{report.ratio_vs_baseline:.2f} vs anchor softmax, "
        f"gate saturated {report.gate_saturation:.0%})",
        file=sys.stderr,
    )
    _emit(args, payload)
    return 0


# ---------------------------------------------------------------------------
# wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="pig", description="Pointer-generator decoding over step traces")
    sub = parser.add_subparsers(dest="cmd")

    p = sub.add_parser("decode", parents=[], help="generate tokens from a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--mode", choices=("greedy", "sample"), default=None)
    p.add_argument("--max-new-tokens", type=int, default=None, dest="max_new_tokens")
    p.add_argument("--stop-tokens", default=None, dest="stop_tokens")
    _add_step_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("score", help="log probability of a candidate under a trace")
    p.add_argument("--trace", required=True)
    p.add_argument("--tokens", default=None, help="comma-separated ids; default: recorded forced ids")
    _add_step_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval-mc", help="multiple-choice truthfulness metrics over scored traces")
    p.add_argument("--data", required=True)
    p.add_argument("--trace-dir", required=True, dest="trace_dir")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--fold-seed", type=int, default=0, dest="fold_seed")
    p.add_argument("--select-metric", default=None, dest="select_metric")
    p.add_argument("--mc3-per-item", action="store_true", default=False, dest="mc3_per_item")
    _add_step_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_eval_mc)

    p = sub.add_parser("eval-f1", help="answer F1 for predictions against a QA dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--keep-articles", action="store_true", default=False, dest="keep_articles")
    _add_common_flags(p)
    p.set_defaults(func=_cmd_eval_f1)

    p = sub.add_parser("eval-factor", help="completion ranking accuracy over scored traces")
    p.add_argument("--data", required=True)
    p.add_argument("--trace-dir", required=True, dest="trace_dir")
    p.add_argument("--jobs", type=int, default=None)
    _add_step_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_eval_factor)

    p = sub.add_parser("trace-synth", help="write a deterministic synthetic trace")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--num-layers", type=int, required=True, dest="num_layers")
    p.add_argument("--steps", required=True, help="comma plan, e.g. f,c,f")
    p.add_argument("--span-tokens", required=True, dest="span_tokens")
    p.add_argument("--prefix-tokens", default=None, dest="prefix_tokens")
    p.add_argument("--suffix-tokens", default=None, dest="suffix_tokens")
    p.add_argument("--boost", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_trace_synth)

    p = sub.add_parser("bench", help="time decode_step against the anchor softmax")
    p.add_argument("--vocab", type=int, default=32000)
    p.add_argument("--jsd-layers", type=int, default=16, dest="jsd_layers")
    p.add_argument("--reps", type=int, default=300)
    _add_step_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("PIG_LOG", "warning").upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv: Sequence[str]) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (PigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))
