"""Pathology vocabulary, label values and label vectors.

The 14 chest X-ray categories are fixed and ordered; every other module
indexes categories by position in :data:`CATEGORIES`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

CATEGORIES: tuple[str, ...] = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
)
N_CATEGORIES = len(CATEGORIES)
CATEGORY_INDEX: dict[str, int] = {name: i for i, name in enumerate(CATEGORIES)}
NO_FINDING = CATEGORY_INDEX["No Finding"]


class LabelValue(enum.Enum):
    POSITIVE = 1.0
    NEGATIVE = 0.0
    UNCERTAIN = -1.0

    @classmethod
    def coerce(cls, raw: object) -> "LabelValue | None":
        """Map a JSON number onto a label value, or None if it is not one of 1, 0, -1."""
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            return None
        if isinstance(raw, float) and not math.isfinite(raw):
            return None
        for member in cls:
            if raw == member.value:
                return member
        return None


class Provenance(enum.Enum):
    GROUND_TRUTH = "GroundTruth"
    LABELER_OUTPUT = "LabelerOutput"
    ANSWER_BLOCK = "AnswerBlock"


@dataclass(frozen=True)
class LabelVector:
    """A complete assignment of one :class:`LabelValue` per category.

    Equality ignores ``provenance``: two vectors carrying the same values are
    the same diagnosis regardless of where they came from.
    """

    values: tuple[LabelValue, ...]
    provenance: Provenance = field(default=Provenance.GROUND_TRUTH, compare=False)

    def __post_init__(self):
        if len(self.values) != N_CATEGORIES:
            raise ValueError(f"expected {N_CATEGORIES} label values, got {len(self.values)}")
        if not all(isinstance(v, LabelValue) for v in self.values):
            raise TypeError("label values must be LabelValue members")

    def __getitem__(self, key: int | str) -> LabelValue:
        if isinstance(key, str):
            key = CATEGORY_INDEX[key]
        return self.values[key]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return N_CATEGORIES

    @classmethod
    def from_values(cls, values: Iterable[float | LabelValue],
                    provenance: Provenance = Provenance.GROUND_TRUTH) -> "LabelVector":
        out = []
        for v in values:
            if isinstance(v, LabelValue):
                out.append(v)
                continue
            lv = LabelValue.coerce(v)
            if lv is None:
                raise ValueError(f"not a label value: {v!r}")
            out.append(lv)
        return cls(tuple(out), provenance)

    @classmethod
    def filled(cls, value: LabelValue, provenance: Provenance = Provenance.GROUND_TRUTH,
               **overrides: LabelValue) -> "LabelVector":
        """All categories set to ``value``; keyword overrides use underscored names."""
        values = [value] * N_CATEGORIES
        for key, v in overrides.items():
            values[CATEGORY_INDEX[key.replace("_", " ")]] = v
        return cls(tuple(values), provenance)

    def with_provenance(self, provenance: Provenance) -> "LabelVector":
        return LabelVector(self.values, provenance)

    def to_json_map(self) -> dict[str, float]:
        return {name: v.value for name, v in zip(CATEGORIES, self.values)}

    def as_floats(self) -> list[float]:
        return [v.value for v in self.values]


@dataclass(frozen=True)
class SchemaReport:
    """Why a JSON label map failed to form a complete :class:`LabelVector`."""

    missing: tuple[str, ...] = ()
    unknown: tuple[str, ...] = ()
    out_of_range: tuple[tuple[str, object], ...] = ()
    # category index -> value for every key that did validate
    valid: Mapping[int, LabelValue] = field(default_factory=dict, compare=False)

    @property
    def ok(self) -> bool:
        return not (self.missing or self.unknown or self.out_of_range)


def label_vector_from_json_map(
    raw: Mapping[str, object],
    provenance: Provenance = Provenance.ANSWER_BLOCK,
) -> LabelVector | SchemaReport:
    """Validate a parsed JSON object against the 14-key label schema.

    Keys are matched exactly after stripping surrounding whitespace. Integer
    forms of 1, 0 and -1 are accepted. Malformed input is returned as a
    :class:`SchemaReport`, never raised.
    """
    valid: dict[int, LabelValue] = {}
    unknown: list[str] = []
    bad: list[tuple[str, object]] = []
    for key, value in raw.items():
        name = key.strip() if isinstance(key, str) else key
        idx = CATEGORY_INDEX.get(name) if isinstance(name, str) else None
        if idx is None:
            unknown.append(str(key))
            continue
        lv = LabelValue.coerce(value)
        if lv is None:
            bad.append((name, value))
        else:
            valid[idx] = lv
    seen = {k.strip() for k in raw if isinstance(k, str)}
    missing = tuple(name for name in CATEGORIES if name not in seen)
    report = SchemaReport(missing, tuple(unknown), tuple(bad), valid)
    if report.ok:
        return LabelVector(tuple(valid[i] for i in range(N_CATEGORIES)), provenance)
    return report
