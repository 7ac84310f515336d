"""Composite reward: five components and their weighted total.

==========  ==============================================  ===========
component   definition                                      range
==========  ==============================================  ===========
r1          CFS(answer | truth := labels(think))            [-0.3, 2]
r2          CFS(labels(think) | truth := ground truth)      [-0.3, 2]
r3          CFS(answer | truth := ground truth)             [-0.3, 2]
r4          IDF-weighted token-match F1(think, reference)   [0, 1]
r5          0.5 * tags_present + 0.5 * json_valid           {0, .5, 1}
==========  ==============================================  ===========

``labels(think)`` is the labeler applied to the think block.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .corpus import IdfTable
from .labeler import Labeler, default_lexicon
from .labels import N_CATEGORIES, LabelValue, LabelVector
from .metrics import tokenize
from .protocol import FormatFlags, StructuredOutput

MISSING = "missing"
_VALUE_KEYS = {"positive": LabelValue.POSITIVE, "negative": LabelValue.NEGATIVE,
               "uncertain": LabelValue.UNCERTAIN}


@dataclass(frozen=True)
class CfsScoringMatrix:
    """Per-category score indexed by (ground truth, prediction).

    Predictions may be a :class:`LabelValue` or ``MISSING``.
    """

    table: Mapping[tuple[LabelValue, LabelValue | str], float] = field(default_factory=lambda: {
        (LabelValue.POSITIVE, LabelValue.POSITIVE): 2.0,
        (LabelValue.POSITIVE, LabelValue.NEGATIVE): -0.3,
        (LabelValue.POSITIVE, LabelValue.UNCERTAIN): 0.0,
        (LabelValue.POSITIVE, MISSING): 0.0,
        (LabelValue.NEGATIVE, LabelValue.NEGATIVE): 1.0,
        (LabelValue.NEGATIVE, LabelValue.POSITIVE): -0.3,
        (LabelValue.NEGATIVE, LabelValue.UNCERTAIN): 0.0,
        (LabelValue.NEGATIVE, MISSING): 0.0,
        (LabelValue.UNCERTAIN, LabelValue.POSITIVE): 0.5,
        (LabelValue.UNCERTAIN, LabelValue.NEGATIVE): 0.5,
        (LabelValue.UNCERTAIN, LabelValue.UNCERTAIN): 0.5,
        (LabelValue.UNCERTAIN, MISSING): 0.5,
    })

    def __post_init__(self):
        cols = list(LabelValue) + [MISSING]
        absent = [(t, p) for t in LabelValue for p in cols if (t, p) not in self.table]
        if absent:
            raise ValueError(f"scoring matrix lacks entries {absent}")

    def score(self, truth: LabelValue, predicted: LabelValue | None) -> float:
        return self.table[(truth, MISSING if predicted is None else predicted)]

    @property
    def bounds(self) -> tuple[float, float]:
        return min(self.table.values()), max(self.table.values())

    def to_json(self) -> dict:
        out: dict[str, dict[str, float]] = {}
        for (t, p), s in self.table.items():
            out.setdefault(t.name.lower(), {})[p if p == MISSING else p.name.lower()] = s
        return out

    @classmethod
    def from_json(cls, d: Mapping[str, Mapping[str, float]]) -> "CfsScoringMatrix":
        """``{"positive": {"positive": 2.0, ..., "missing": 0.0}, ...}``; omitted cells keep defaults."""
        table = dict(cls().table)
        for t_name, row in d.items():
            if t_name not in _VALUE_KEYS:
                raise ValueError(f"unknown truth row {t_name!r}")
            for p_name, s in row.items():
                if p_name != MISSING and p_name not in _VALUE_KEYS:
                    raise ValueError(f"unknown prediction column {p_name!r}")
                p = MISSING if p_name == MISSING else _VALUE_KEYS[p_name]
                table[(_VALUE_KEYS[t_name], p)] = float(s)
        return cls(table)


DEFAULT_MATRIX = CfsScoringMatrix()


@dataclass(frozen=True)
class RewardWeights:
    consistency: float = 0.2
    think_acc: float = 0.5
    answer_acc: float = 1.0
    semantic: float = 0.3
    format: float = 0.5

    def __post_init__(self):
        bad = [f.name for f in fields(self) if not getattr(self, f.name) >= 0]
        if bad:
            raise ValueError(f"reward weights must be >= 0: {bad}")

    def as_tuple(self) -> tuple[float, float, float, float, float]:
        return (self.consistency, self.think_acc, self.answer_acc, self.semantic, self.format)

    def __add__(self, other: "RewardWeights") -> "RewardWeights":
        return RewardWeights(*(a + b for a, b in zip(self.as_tuple(), other.as_tuple())))

    @classmethod
    def from_sequence(cls, lambdas: Sequence[float]) -> "RewardWeights":
        return cls(*map(float, lambdas))

    @classmethod
    def from_json(cls, d) -> "RewardWeights":
        if isinstance(d, (list, tuple)):
            return cls.from_sequence(d)
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass
class RewardBreakdown:
    r1_consistency: float
    r2_think_acc: float
    r3_answer_acc: float
    r4_semantic: float
    r5_format: float
    total: float
    weights: RewardWeights = field(default_factory=RewardWeights)
    # per-category CFS terms for r1..r3
    diagnostics: dict[str, list[float]] = field(default_factory=dict)

    @property
    def components(self) -> tuple[float, float, float, float, float]:
        return (self.r1_consistency, self.r2_think_acc, self.r3_answer_acc,
                self.r4_semantic, self.r5_format)

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        return d


def cfs_terms(predicted: LabelVector | Mapping[int, LabelValue] | None, truth: LabelVector,
              matrix: CfsScoringMatrix = DEFAULT_MATRIX) -> list[float]:
    if predicted is None:
        lookup: Mapping[int, LabelValue] = {}
    elif isinstance(predicted, LabelVector):
        lookup = dict(enumerate(predicted.values))
    else:
        lookup = predicted
    return [matrix.score(truth.values[c], lookup.get(c)) for c in range(N_CATEGORIES)]


def cfs(predicted, truth: LabelVector, matrix: CfsScoringMatrix = DEFAULT_MATRIX) -> float:
    """Clinical F1 Score: mean per-category asymmetric score.

    ``predicted`` may be a full vector, a partial ``{category index: value}``
    map, or ``None``; absent categories score through the missing column.
    """
    return sum(cfs_terms(predicted, truth, matrix)) / N_CATEGORIES


def _answer(out: StructuredOutput):
    return out.answer_labels if out.answer_labels is not None else out.answer_partial


def reward_r1_consistency(out: StructuredOutput, labeler: Labeler | None = None,
                          matrix: CfsScoringMatrix = DEFAULT_MATRIX) -> float:
    return cfs(_answer(out), (labeler or default_lexicon()).extract(out.think_text), matrix)


def reward_r2_think_acc(out: StructuredOutput, truth: LabelVector, labeler: Labeler | None = None,
                        matrix: CfsScoringMatrix = DEFAULT_MATRIX) -> float:
    return cfs((labeler or default_lexicon()).extract(out.think_text), truth, matrix)


def reward_r3_answer_acc(out: StructuredOutput, truth: LabelVector,
                         matrix: CfsScoringMatrix = DEFAULT_MATRIX) -> float:
    return cfs(_answer(out), truth, matrix)


class Similarity(Protocol):
    def __call__(self, candidate: str, reference: str) -> float: ...


def idf_token_f1(candidate: str, reference: str, idf: IdfTable | Callable[[str], float] | None = None) -> float:
    """BERTScore-shaped F1 with an exact-match kernel.

    Each token takes its best match on the other side (1 if the token occurs
    there, else 0); precision and recall are IDF-weighted averages over the
    candidate and reference tokens respectively.
    """
    idf = idf or IdfTable()
    cand, ref = tokenize(candidate), tokenize(reference)
    if not cand or not ref:
        return 0.0
    ref_set, cand_set = set(ref), set(cand)
    w_c = Counter(cand)
    w_r = Counter(ref)
    p_num = sum(n * idf(t) for t, n in w_c.items() if t in ref_set)
    p_den = sum(n * idf(t) for t, n in w_c.items())
    r_num = sum(n * idf(t) for t, n in w_r.items() if t in cand_set)
    r_den = sum(n * idf(t) for t, n in w_r.items())
    p, r = p_num / p_den, r_num / r_den
    if p + r == 0:
        return 0.0
    return min(1.0, max(0.0, 2 * p * r / (p + r)))


def reward_r4_semantic(think: str, reference: str, idf: IdfTable | None = None,
                       similarity: Similarity | None = None) -> float:
    if similarity is not None:
        return min(1.0, max(0.0, float(similarity(think, reference))))
    return idf_token_f1(think, reference, idf)


def reward_r5_format(flags: FormatFlags) -> float:
    return 0.5 * flags.tags_present + 0.5 * flags.json_valid


@dataclass
class RewardConfig:
    weights: RewardWeights = field(default_factory=RewardWeights)
    matrix: CfsScoringMatrix = DEFAULT_MATRIX

    @classmethod
    def from_json(cls, d: Mapping) -> "RewardConfig":
        return cls(RewardWeights.from_json(d.get("weights", {})),
                   CfsScoringMatrix.from_json(d.get("matrix", {})))

    @classmethod
    def load(cls, path: str | Path) -> "RewardConfig":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def reward_total(out: StructuredOutput, truth_labels: LabelVector, truth_text: str,
                 weights: RewardWeights = RewardWeights(), labeler: Labeler | None = None,
                 idf: IdfTable | None = None, matrix: CfsScoringMatrix = DEFAULT_MATRIX,
                 similarity: Similarity | None = None) -> RewardBreakdown:
    labeler = labeler or default_lexicon()
    think_labels = labeler.extract(out.think_text)
    answer = _answer(out)
    d1 = cfs_terms(answer, think_labels, matrix)
    d2 = cfs_terms(think_labels, truth_labels, matrix)
    d3 = cfs_terms(answer, truth_labels, matrix)
    r = (sum(d1) / N_CATEGORIES, sum(d2) / N_CATEGORIES, sum(d3) / N_CATEGORIES,
         reward_r4_semantic(out.think_text, truth_text, idf, similarity),
         reward_r5_format(out.flags))
    total = sum(w * x for w, x in zip(weights.as_tuple(), r))
    return RewardBreakdown(*r, total=total, weights=weights,
                           diagnostics={"r1": d1, "r2": d2, "r3": d3})


def score_group(outputs: Sequence[StructuredOutput], truth_labels: LabelVector, truth_text: str,
                weights: RewardWeights = RewardWeights(), labeler: Labeler | None = None,
                idf: IdfTable | None = None, matrix: CfsScoringMatrix = DEFAULT_MATRIX,
                executor=None) -> list[RewardBreakdown]:
    """Score every candidate of a group; results keep candidate order.

    Pass a ``concurrent.futures`` executor to fan the candidates out.
    """
    def one(o):
        return reward_total(o, truth_labels, truth_text, weights, labeler, idf, matrix)

    if executor is None:
        return [one(o) for o in outputs]
    return list(executor.map(one, outputs))
