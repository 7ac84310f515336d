"""Rule-based findings labeler.

Maps free-text findings to a :class:`~consistrad.labels.LabelVector` with
trigger phrases plus negation and uncertainty cues, NegEx style:

* text is split into clauses on ``. ! ?`` , semicolons and newlines;
* a cue scopes over a trigger when it occurs earlier in the same clause;
* uncertainty outranks negation within a clause;
* when a category is mentioned more than once, the last mention wins;
* ``No Finding`` is Positive iff every other category is Negative.

Anything with an ``extract(text) -> LabelVector`` method can stand in for
:class:`Lexicon` wherever a labeler is expected.
"""

from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Protocol

from .labels import CATEGORIES, CATEGORY_INDEX, NO_FINDING, LabelValue, LabelVector, Provenance

_CLAUSE_SPLIT = re.compile(r"[.!?;\n]+")

DEFAULT_NEGATION_CUES = (
    "no", "not", "without", "free of", "resolved", "negative for",
    "no evidence of", "absence of",
)
DEFAULT_UNCERTAINTY_CUES = (
    "possible", "possibly", "cannot exclude", "may represent", "probable",
    "questionable", "suspicious for", "concerning for",
)

DEFAULT_TRIGGERS: dict[str, tuple[str, ...]] = {
    "Atelectasis": ("atelectasis", "atelectatic"),
    "Cardiomegaly": ("cardiomegaly", "enlarged heart", "heart is enlarged"),
    "Consolidation": ("consolidation", "consolidative"),
    "Edema": ("edema", "pulmonary vascular congestion"),
    "Enlarged Cardiomediastinum": (
        "enlarged cardiomediastinum", "widened mediastinum", "mediastinal widening",
    ),
    "Fracture": ("fracture", "fractures", "fractured"),
    "Lung Lesion": ("lung lesion", "nodule", "nodules", "mass"),
    "Lung Opacity": ("opacity", "opacities", "opacification"),
    "No Finding": ("no acute cardiopulmonary abnormality",),
    "Pleural Effusion": ("pleural effusion", "pleural effusions", "effusion"),
    "Pleural Other": ("pleural thickening", "pleural scarring", "pleural plaque"),
    "Pneumonia": ("pneumonia",),
    "Pneumothorax": ("pneumothorax",),
    "Support Devices": (
        "support device", "support devices", "endotracheal tube", "pacemaker",
        "catheter", "port-a-cath", "picc line", "enteric tube",
    ),
}

LEXICON_VERSION = "rules-1"
_MEMO_LIMIT = 200_000


class Labeler(Protocol):
    def extract(self, text: str) -> LabelVector: ...


def _phrase_pattern(phrases: tuple[str, ...]) -> re.Pattern:
    alts = sorted((re.escape(p.lower()) for p in phrases), key=len, reverse=True)
    return re.compile(r"(?<![a-z0-9])(?:" + "|".join(alts) + r")(?![a-z0-9])")


@dataclass(frozen=True)
class LabelerRule:
    category: str
    trigger_phrases: tuple[str, ...]
    negation_cues: tuple[str, ...] = DEFAULT_NEGATION_CUES
    uncertainty_cues: tuple[str, ...] = DEFAULT_UNCERTAINTY_CUES

    def __post_init__(self):
        if self.category not in CATEGORY_INDEX:
            raise ValueError(f"unknown category {self.category!r}")
        if not self.trigger_phrases:
            raise ValueError(f"{self.category}: at least one trigger phrase required")
        if not self.negation_cues or not self.uncertainty_cues:
            raise ValueError(f"{self.category}: cue lists must be non-empty")

    @cached_property
    def _triggers(self) -> re.Pattern:
        return _phrase_pattern(self.trigger_phrases)

    @cached_property
    def _negation(self) -> re.Pattern:
        return _phrase_pattern(self.negation_cues)

    @cached_property
    def _uncertainty(self) -> re.Pattern:
        return _phrase_pattern(self.uncertainty_cues)

    def clause_status(self, clause: str) -> LabelValue | None:
        """Status asserted by the last trigger in a lowercased clause, or None."""
        status = None
        for m in self._triggers.finditer(clause):
            head = clause[:m.start()]
            if self._uncertainty.search(head):
                status = LabelValue.UNCERTAIN
            elif self._negation.search(head):
                status = LabelValue.NEGATIVE
            else:
                status = LabelValue.POSITIVE
        return status


@dataclass(frozen=True)
class Lexicon:
    rules: tuple[LabelerRule, ...]
    version: str = LEXICON_VERSION

    def __post_init__(self):
        names = [r.category for r in self.rules]
        if sorted(names) != sorted(CATEGORIES) or len(set(names)) != len(names):
            raise ValueError("lexicon must hold exactly one rule per category")

    @cached_property
    def _by_index(self) -> tuple[LabelerRule, ...]:
        lookup = {r.category: r for r in self.rules}
        return tuple(lookup[name] for name in CATEGORIES)

    def rule(self, category: str) -> LabelerRule:
        return self._by_index[CATEGORY_INDEX[category]]

    @cached_property
    def _memo(self) -> dict[str, LabelVector]:
        return {}

    def extract(self, text: str) -> LabelVector:
        """Memoized :func:`extract_labels`; rendered candidates repeat a lot."""
        hit = self._memo.get(text)
        if hit is None:
            if len(self._memo) >= _MEMO_LIMIT:
                self._memo.clear()
            hit = self._memo[text] = extract_labels(text, self)
        return hit

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "categories": {
                r.category: {
                    "triggers": list(r.trigger_phrases),
                    "negation_cues": list(r.negation_cues),
                    "uncertainty_cues": list(r.uncertainty_cues),
                }
                for r in self._by_index
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "Lexicon":
        """Build from ``{"version", "negation_cues"?, "uncertainty_cues"?, "categories"}``.

        Per-category ``negation_cues``/``uncertainty_cues`` override the
        top-level lists, which in turn default to the built-in cues.
        """
        neg = tuple(data.get("negation_cues", DEFAULT_NEGATION_CUES))
        unc = tuple(data.get("uncertainty_cues", DEFAULT_UNCERTAINTY_CUES))
        cats = data.get("categories")
        if not isinstance(cats, dict):
            raise ValueError("lexicon JSON needs a 'categories' object")
        rules = []
        for name, entry in cats.items():
            if isinstance(entry, list):
                entry = {"triggers": entry}
            rules.append(LabelerRule(
                name,
                tuple(t.lower() for t in entry["triggers"]),
                tuple(entry.get("negation_cues", neg)),
                tuple(entry.get("uncertainty_cues", unc)),
            ))
        return cls(tuple(rules), str(data.get("version", "custom")))

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@functools.lru_cache(maxsize=1)
def default_lexicon() -> Lexicon:
    return Lexicon(tuple(LabelerRule(name, DEFAULT_TRIGGERS[name]) for name in CATEGORIES))


def split_clauses(text: str) -> list[str]:
    return [c.strip() for c in _CLAUSE_SPLIT.split(text.lower()) if c.strip()]


def extract_labels(text: str, lexicon: Lexicon | None = None) -> LabelVector:
    lexicon = lexicon or default_lexicon()
    rules = lexicon._by_index
    values = [LabelValue.NEGATIVE] * len(CATEGORIES)
    for clause in split_clauses(text or ""):
        for idx, rule in enumerate(rules):
            if idx == NO_FINDING:
                continue
            status = rule.clause_status(clause)
            if status is not None:
                values[idx] = status
    normal = all(v is LabelValue.NEGATIVE for i, v in enumerate(values) if i != NO_FINDING)
    values[NO_FINDING] = LabelValue.POSITIVE if normal else LabelValue.NEGATIVE
    return LabelVector(tuple(values), Provenance.LABELER_OUTPUT)
