"""``consistrad`` command line.

Subcommands: gen-corpus, parse, label, reward, eval, train. Every command
accepts ``--config``, ``--seed``, ``--out`` and ``--format {json,table}``.
All randomness derives from ``--seed`` (default 0).

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical error.
Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .corpus import CorpusFormatError, CorpusSpec, StudyRecord, build_idf, generate_corpus, read_jsonl, write_jsonl
from .grpo import NonFiniteObjectiveError, TrainConfig, evaluate_policy, generate, train, warm_start, write_trace
from .labeler import Lexicon, default_lexicon
from .metrics import evaluate_outputs
from .policy import PolicyParams
from .protocol import parse_output
from .rewards import CfsScoringMatrix, RewardConfig, RewardWeights, reward_total

DEFAULT_SEED = 0
# CLI float outputs are rounded so goldens do not hinge on the last ulp.
FLOAT_DIGITS = 12

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    def __init__(self, message: str, details: Sequence[str] = ()):
        super().__init__(message)
        self.details = list(details)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _round(obj: Any) -> Any:
    if isinstance(obj, float):
        return round(obj, FLOAT_DIGITS) + 0.0
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    return obj


def _dumps(obj: Any, indent: int | None = None) -> str:
    return json.dumps(_round(obj), sort_keys=True, indent=indent)


def _write_jsonl(rows, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(_dumps(row) + "\n")


def _read_json(path: str | Path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: expected a JSON object")
    return data


def _read_predictions(path: str | Path) -> list[tuple[str, str]]:
    rows = []
    try:
        fh = open(path, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            if not isinstance(d, dict) or not isinstance(d.get("study_id"), str) or not isinstance(d.get("output"), str):
                raise DataError(f"{path}:{line_no}: expected {{\"study_id\": str, \"output\": str}}")
            rows.append((d["study_id"], d["output"]))
    return rows


def _read_corpus(path: str | Path) -> list[StudyRecord]:
    try:
        return read_jsonl(path)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None


def _by_id(records: Sequence[StudyRecord]) -> dict[str, StudyRecord]:
    out = {}
    for r in records:
        if r.study_id in out:
            raise DataError(f"duplicate study_id {r.study_id!r} in reference corpus")
        out[r.study_id] = r
    return out


def _lexicon(path: str | None, base: Path | None = None):
    if path is None:
        return default_lexicon()
    p = Path(path) if base is None else base / path
    try:
        return Lexicon.from_json(_read_json(p))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{p}: bad lexicon ({exc})") from None


def _emit(args, payload: dict, table: str | None = None) -> None:
    if args.format == "table" and table is not None:
        print(table)
    else:
        print(_dumps(payload, indent=2))


def _need_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    return Path(args.out)


def _summary_table(title: str, rows: Sequence[tuple[str, float]]) -> str:
    width = max(len(title), *(len(k) for k, _ in rows))
    lines = [f"{title:<{width}}  {'fraction':>8}  {'x100':>7}", f"{'-' * width}  {'-' * 8}  {'-' * 7}"]
    lines += [f"{k:<{width}}  {v:>8.4f}  {100 * v:>7.2f}" for k, v in rows]
    return "\n".join(lines)


# --- subcommands -------------------------------------------------------------

def cmd_gen_corpus(args) -> int:
    out = _need_out(args)
    cfg = _read_json(args.config) if args.config else {}
    problems = [f"unknown key {k!r}" for k in cfg if k not in {"n_studies", "p_positive", "p_uncertain", "p_noise"}]
    if problems:
        raise DataError("invalid corpus config", problems)
    try:
        spec = CorpusSpec.from_json({**cfg, "seed": args.seed})
    except (TypeError, ValueError) as exc:
        raise DataError("invalid corpus config", [str(exc)]) from None
    records = generate_corpus(spec)
    write_jsonl(records, out)
    splits = {s: sum(r.split == s for r in records) for s in ("train", "val", "test")}
    _emit(args, {"n_studies": len(records), "splits": splits, "out": str(out)})
    return EXIT_OK


def cmd_parse(args) -> int:
    out = _need_out(args)
    preds = _read_predictions(args.input)
    rows, counts = [], {"tags_present": 0, "json_valid": 0, "schema_complete": 0, "ordering_ok": 0}
    for sid, raw in preds:
        parsed = parse_output(raw)
        rows.append({"study_id": sid, **parsed.to_dict()})
        for k, v in parsed.flags.to_dict().items():
            counts[k] += int(v)
    _write_jsonl(rows, out)
    n = len(rows)
    summary = {"n": n, "flags": {k: (v / n if n else 0.0) for k, v in counts.items()}}
    _emit(args, summary, _summary_table(f"flags (n={n})", list(summary["flags"].items())))
    return EXIT_OK


def cmd_label(args) -> int:
    out = _need_out(args)
    lexicon = _lexicon(args.lexicon)
    rows = []
    try:
        fh = open(args.input, encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"file not found: {args.input}") from None
    with fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                text = d["findings_text"]
                if not isinstance(text, str):
                    raise TypeError("findings_text must be a string")
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{args.input}:{line_no}: {exc}") from None
            labels = lexicon.extract(text)
            rows.append({"study_id": d.get("study_id", str(line_no)), "labels": labels.to_json_map()})
    _write_jsonl(rows, out)
    _emit(args, {"n": len(rows), "lexicon": getattr(lexicon, "version", "custom"), "out": str(out)})
    return EXIT_OK


def _reward_config(args) -> tuple[RewardConfig, Any]:
    if not args.config:
        return RewardConfig(), default_lexicon()
    path = Path(args.config)
    d = _read_json(path)
    problems = [f"unknown key {k!r}" for k in d if k not in {"weights", "matrix", "lexicon"}]
    try:
        weights = RewardWeights.from_json(d.get("weights", {}))
    except (TypeError, ValueError) as exc:
        problems.append(f"weights: {exc}")
        weights = RewardWeights()
    try:
        matrix = CfsScoringMatrix.from_json(d.get("matrix", {}))
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        problems.append(f"matrix: {exc}")
        matrix = CfsScoringMatrix()
    if d.get("lexicon") is not None and not (path.parent / d["lexicon"]).exists():
        problems.append(f"lexicon: file not found {d['lexicon']!r}")
    if problems:
        raise DataError("invalid reward config", problems)
    return RewardConfig(weights, matrix), _lexicon(d.get("lexicon"), path.parent)


def cmd_reward(args) -> int:
    out = _need_out(args)
    if not args.ref:
        raise UsageError("reward requires --ref")
    cfg, lexicon = _reward_config(args)
    refs = _by_id(_read_corpus(args.ref))
    preds = _read_predictions(args.input)
    idf = build_idf(refs.values())
    rows, seen = [], {}
    for sid, raw in preds:
        if sid not in refs:
            raise DataError(f"prediction for unknown study_id {sid!r}")
        ref = refs[sid]
        b = reward_total(parse_output(raw), ref.labels, ref.findings_text, cfg.weights, lexicon, idf, cfg.matrix)
        row = {"study_id": sid, "candidate": seen.get(sid, 0), **b.to_json()}
        if not args.diagnostics:
            row.pop("diagnostics")
        rows.append(row)
        seen[sid] = seen.get(sid, 0) + 1
    _write_jsonl(rows, out)
    keys = ("r1_consistency", "r2_think_acc", "r3_answer_acc", "r4_semantic", "r5_format", "total")
    means = {k: (float(np.mean([r[k] for r in rows])) if rows else 0.0) for k in keys}
    _emit(args, {"n": len(rows), "mean": means}, _summary_table(f"reward (n={len(rows)})", list(means.items())))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.ref:
        raise UsageError("eval requires --ref")
    opts = _read_json(args.config) if args.config else {}
    bad = [f"unknown key {k!r}" for k in opts if k not in {"lexicon", "uncertain"}]
    if opts.get("uncertain", "negative") not in ("negative", "positive"):
        bad.append("uncertain must be 'negative' or 'positive'")
    if bad:
        raise DataError("invalid eval config", bad)
    lexicon = _lexicon(opts.get("lexicon"), Path(args.config).parent if args.config else None)
    refs = _by_id(_read_corpus(args.ref))
    preds = _read_predictions(args.input)
    missing = [sid for sid, _ in preds if sid not in refs]
    if missing:
        raise DataError("predictions reference unknown study ids", missing[:10])
    report = evaluate_outputs([parse_output(raw) for _, raw in preds],
                              [refs[sid].findings_text for sid, _ in preds],
                              [refs[sid].labels for sid, _ in preds], lexicon,
                              opts.get("uncertain", "negative"))
    if args.out:
        Path(args.out).write_text(_dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    _emit(args, report.to_dict(), report.render_table())
    return EXIT_OK


_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


def _train_config(args) -> tuple[TrainConfig, dict, Path | None]:
    """Validate the whole run config and report every problem at once."""
    raw = _read_json(args.config) if args.config else {}
    base = Path(args.config).parent if args.config else None
    problems = []
    for k in raw:
        if k not in {"train", "corpus", "corpus_path", "lexicon", "eval"}:
            problems.append(f"unknown key {k!r}")
    tr = raw.get("train", {})
    for k in tr:
        if k == "seed":
            problems.append("train.seed: seeds come from --seed only")
        elif k not in _TRAIN_KEYS:
            problems.append(f"train: unknown key {k!r}")
    cfg = None
    kw = {k: v for k, v in tr.items() if k in _TRAIN_KEYS}
    try:
        if "weights" in kw:
            kw["weights"] = RewardWeights.from_json(kw["weights"])
        if "matrix" in kw:
            kw["matrix"] = CfsScoringMatrix.from_json(kw["matrix"])
        cfg = TrainConfig(**kw, seed=args.seed)
    except ValueError as exc:
        # TrainConfig joins every violated constraint with "; "
        problems += [f"train: {p}" for p in str(exc).split("; ")]
    except (TypeError, KeyError, AttributeError) as exc:
        problems.append(f"train: {exc}")
    corpus_cfg = raw.get("corpus", {})
    for k in corpus_cfg:
        if k == "seed":
            problems.append("corpus.seed: seeds come from --seed only")
        elif k not in {"n_studies", "p_positive", "p_uncertain", "p_noise"}:
            problems.append(f"corpus: unknown key {k!r}")
    if "corpus_path" in raw and "corpus" in raw:
        problems.append("give either corpus or corpus_path, not both")
    for key in ("corpus_path", "lexicon"):
        if key in raw and not (base / raw[key] if base else Path(raw[key])).exists():
            problems.append(f"{key}: file not found {raw[key]!r}")
    ev = raw.get("eval", {})
    for k in ev:
        if k not in {"decode", "split"}:
            problems.append(f"eval: unknown key {k!r}")
    if ev.get("decode", "sample") not in ("sample", "greedy"):
        problems.append("eval.decode must be 'sample' or 'greedy'")
    if ev.get("split", "test") not in ("train", "val", "test"):
        problems.append("eval.split must be train, val or test")
    if "corpus" in raw and not [p for p in problems if p.startswith("corpus")]:
        try:
            CorpusSpec.from_json(corpus_cfg)
        except (TypeError, ValueError) as exc:
            problems.append(f"corpus: {exc}")
    if problems:
        raise DataError("invalid run config", problems)
    return cfg, raw, base


def cmd_train(args) -> int:
    out = _need_out(args)
    cfg, raw, base = _train_config(args)
    if "corpus_path" in raw:
        corpus = _read_corpus(base / raw["corpus_path"] if base else raw["corpus_path"])
    else:
        corpus = generate_corpus(CorpusSpec.from_json({**raw.get("corpus", {}), "seed": args.seed}))
    lexicon = _lexicon(raw.get("lexicon"), base)
    train_set = [s for s in corpus if s.split == "train"] or list(corpus)
    if not train_set:
        raise DataError("training corpus is empty")
    if any(s.observation is None for s in train_set):
        raise DataError("training studies need an observation field")
    out.mkdir(parents=True, exist_ok=True)
    ref = warm_start(PolicyParams.zeros(), train_set, cfg.warm_start_epochs, cfg.warm_start_lr)
    ref.save(out / "ref_policy.json")
    params, trace = train(cfg, train_set, params=ref, ref=ref, labeler=lexicon, idf=build_idf(train_set))
    params.save(out / "final_policy.json")
    write_trace(trace, out / "trace.jsonl")
    ev = raw.get("eval", {})
    split = ev.get("split", "test")
    held = [s for s in corpus if s.split == split and s.observation is not None] or train_set
    decode = ev.get("decode", "sample")
    raws = generate(params, [s.observation for s in held], decode, args.seed)
    _write_jsonl([{"study_id": s.study_id, "output": r} for s, r in zip(held, raws)], out / "predictions.jsonl")
    report = evaluate_policy(params, held, decode, args.seed, lexicon)
    (out / "metrics.json").write_text(_dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    (out / "config.json").write_text(_dumps({**cfg.to_json(), "eval": {"decode": decode, "split": split}},
                                            indent=2) + "\n", encoding="utf-8")
    _emit(args, report.to_dict(), report.render_table())
    return EXIT_OK


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "parse": cmd_parse,
    "label": cmd_label,
    "reward": cmd_reward,
    "eval": cmd_eval,
    "train": cmd_train,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file for the subcommand")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out", help="output file (directory for train)")
    common.add_argument("--format", choices=("json", "table"), default="json", help="stdout format")

    parser = _Parser(prog="consistrad", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic corpus JSONL")
    p = sub.add_parser("parse", parents=[common], help="parse raw outputs into structured JSONL")
    p.add_argument("input", help="predictions JSONL ({study_id, output} per line)")
    p = sub.add_parser("label", parents=[common], help="label findings texts")
    p.add_argument("input", help="JSONL with a findings_text field per line")
    p.add_argument("--lexicon", help="lexicon JSON (default: built-in)")
    p = sub.add_parser("reward", parents=[common], help="score predictions with the composite reward")
    p.add_argument("input", help="predictions JSONL")
    p.add_argument("--ref", help="reference corpus JSONL")
    p.add_argument("--diagnostics", action="store_true", help="include per-category CFS terms")
    p = sub.add_parser("eval", parents=[common], help="compute the metric suite")
    p.add_argument("input", help="predictions JSONL")
    p.add_argument("--ref", help="reference corpus JSONL")
    sub.add_parser("train", parents=[common], help="warm start then GRPO on the toy policy")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        code, payload = EXIT_USAGE, {"error": "usage", "message": str(exc)}
    except DataError as exc:
        code, payload = EXIT_DATA, {"error": "data", "message": str(exc), "details": exc.details}
    except CorpusFormatError as exc:
        code, payload = EXIT_DATA, {"error": "data", "message": str(exc), "path": exc.path, "line": exc.line_no}
    except (NonFiniteObjectiveError, FloatingPointError) as exc:
        code, payload = EXIT_NUMERIC, {"error": "numerical", "message": str(exc),
                                       "candidate": getattr(exc, "candidate", None)}
    except OSError as exc:
        code, payload = EXIT_DATA, {"error": "data", "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
