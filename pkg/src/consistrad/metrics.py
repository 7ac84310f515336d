"""Evaluation metrics: BLEU-1..4, ROUGE-L, multilabel F1 and self-consistency."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np

from .labeler import Labeler, default_lexicon
from .labels import N_CATEGORIES, LabelValue, LabelVector
from .protocol import StructuredOutput

_TOKEN = re.compile(r"[a-z0-9]+")

Mode = Literal["macro", "micro"]
UncertainPolicy = Literal["negative", "positive"]


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN.findall((text or "").lower())


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _bleu_from_counts(matches, totals, cand_len, ref_len, n) -> float:
    if cand_len == 0:
        return 0.0
    if any(m == 0 for m in matches[:n]):
        return 0.0
    log_p = sum(math.log(matches[k] / totals[k]) for k in range(n)) / n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def _clipped_counts(candidate, reference, max_n=4):
    matches, totals = [], []
    for k in range(1, max_n + 1):
        c, r = _ngrams(candidate, k), _ngrams(reference, k)
        matches.append(sum(min(cnt, r[g]) for g, cnt in c.items()))
        totals.append(max(len(candidate) - k + 1, 0))
    return matches, totals


def bleu_n(candidate: Sequence[str], reference: Sequence[str], n: int) -> float:
    """Sentence BLEU with uniform weights up to order ``n`` and brevity penalty, unsmoothed."""
    if n not in (1, 2, 3, 4):
        raise ValueError("n must be in 1..4")
    matches, totals = _clipped_counts(candidate, reference, n)
    return _bleu_from_counts(matches, totals, len(candidate), len(reference), n)


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]],
                n: int) -> float:
    """Corpus BLEU: n-gram matches and lengths pooled before the geometric mean."""
    matches, totals = [0] * n, [0] * n
    cand_len = ref_len = 0
    for c, r in zip(candidates, references, strict=True):
        m, t = _clipped_counts(c, r, n)
        matches = [a + b for a, b in zip(matches, m)]
        totals = [a + b for a, b in zip(totals, t)]
        cand_len += len(c)
        ref_len += len(r)
    return _bleu_from_counts(matches, totals, cand_len, ref_len, n)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """LCS F-measure with beta = 1."""
    if not candidate or not reference:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(candidate), lcs / len(reference)
    return 2 * p * r / (p + r)


def _positive_matrix(vectors: Iterable[LabelVector | None], uncertain: UncertainPolicy) -> np.ndarray:
    rows = []
    for v in vectors:
        if v is None:
            rows.append([False] * N_CATEGORIES)
            continue
        pos = {LabelValue.POSITIVE} | ({LabelValue.UNCERTAIN} if uncertain == "positive" else set())
        rows.append([x in pos for x in v.values])
    return np.asarray(rows, dtype=bool).reshape(-1, N_CATEGORIES)


def confusion_counts(preds, truths, uncertain: UncertainPolicy = "negative"):
    """Per-category (tp, fp, fn) arrays; ``None`` predictions count as all non-positive."""
    preds, truths = list(preds), list(truths)
    if len(preds) != len(truths):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(truths)} truths")
    P = _positive_matrix(preds, uncertain)
    T = _positive_matrix(truths, uncertain)
    tp = (P & T).sum(axis=0)
    fp = (P & ~T).sum(axis=0)
    fn = (~P & T).sum(axis=0)
    return tp, fp, fn


def multilabel_f1(preds: Sequence[LabelVector | None], truths: Sequence[LabelVector],
                  mode: Mode = "macro", uncertain: UncertainPolicy = "negative") -> float:
    """Positive-class F1 over the 14 categories.

    Macro averages per-category F1 over categories with any positive truth
    or positive prediction; categories with neither are skipped. When every
    category is skipped (or, for micro, nothing is positive anywhere) there
    is nothing to disagree on and the score is 1.0.
    """
    tp, fp, fn = confusion_counts(preds, truths, uncertain)
    if mode == "micro":
        denom = 2 * tp.sum() + fp.sum() + fn.sum()
        return 1.0 if denom == 0 else float(2 * tp.sum() / denom)
    if mode != "macro":
        raise ValueError(f"unknown mode {mode!r}")
    denom = 2 * tp + fp + fn
    active = denom > 0
    if not active.any():
        return 1.0
    return float(np.mean(2 * tp[active] / denom[active]))


def scs(outputs: Sequence[StructuredOutput], labeler: Labeler | None = None,
        uncertain: UncertainPolicy = "negative") -> tuple[float, float]:
    """Self-consistency: F1 of each answer block against labels extracted from its own think text."""
    labeler = labeler or default_lexicon()
    truths = [labeler.extract(o.think_text) for o in outputs]
    preds = [o.answer_labels for o in outputs]
    return (multilabel_f1(preds, truths, "macro", uncertain),
            multilabel_f1(preds, truths, "micro", uncertain))


@dataclass
class MetricsReport:
    bleu: tuple[float, float, float, float]
    rouge_l: float
    report_macro_f1: float
    report_micro_f1: float
    answer_macro_f1: float
    answer_micro_f1: float
    scs_macro: float
    scs_micro: float
    n_examples: int
    # Slots for scores computed by external tools (METEOR, BERTScore, ...).
    external: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bleu"] = list(self.bleu)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render_table(self) -> str:
        rows = [
            ("BLEU-1", self.bleu[0]), ("BLEU-2", self.bleu[1]),
            ("BLEU-3", self.bleu[2]), ("BLEU-4", self.bleu[3]),
            ("ROUGE-L", self.rouge_l),
            ("Report Macro-F1", self.report_macro_f1), ("Report Micro-F1", self.report_micro_f1),
            ("Answer Macro-F1", self.answer_macro_f1), ("Answer Micro-F1", self.answer_micro_f1),
            ("SCS Macro-F1", self.scs_macro), ("SCS Micro-F1", self.scs_micro),
        ]
        rows += sorted(self.external.items())
        width = max(len(name) for name, _ in rows)
        lines = [f"{'metric':<{width}}  {'fraction':>8}  {'x100':>7}",
                 f"{'-' * width}  {'-' * 8}  {'-' * 7}"]
        lines += [f"{name:<{width}}  {value:>8.4f}  {100 * value:>7.2f}" for name, value in rows]
        lines.append(f"{'n_examples':<{width}}  {self.n_examples:>8d}")
        return "\n".join(lines)


def evaluate_outputs(outputs: Sequence[StructuredOutput], reference_texts: Sequence[str],
                     reference_labels: Sequence[LabelVector], labeler: Labeler | None = None,
                     uncertain: UncertainPolicy = "negative") -> MetricsReport:
    """Full metric suite for parsed outputs against reference findings and labels."""
    if not (len(outputs) == len(reference_texts) == len(reference_labels)):
        raise ValueError("outputs, reference texts and reference labels differ in length")
    labeler = labeler or default_lexicon()
    cands = [tokenize(o.think_text) for o in outputs]
    refs = [tokenize(t) for t in reference_texts]
    extracted = [labeler.extract(o.think_text) for o in outputs]
    answers = [o.answer_labels for o in outputs]
    n = len(outputs)
    return MetricsReport(
        bleu=tuple(corpus_bleu(cands, refs, k) for k in (1, 2, 3, 4)),
        rouge_l=float(np.mean([rouge_l(c, r) for c, r in zip(cands, refs)])) if n else 0.0,
        report_macro_f1=multilabel_f1(extracted, reference_labels, "macro", uncertain),
        report_micro_f1=multilabel_f1(extracted, reference_labels, "micro", uncertain),
        answer_macro_f1=multilabel_f1(answers, reference_labels, "macro", uncertain),
        answer_micro_f1=multilabel_f1(answers, reference_labels, "micro", uncertain),
        scs_macro=multilabel_f1(answers, extracted, "macro", uncertain),
        scs_micro=multilabel_f1(answers, extracted, "micro", uncertain),
        n_examples=n,
    )
