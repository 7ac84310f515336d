"""Synthetic studies, JSONL persistence and IDF tables.

JSONL record schema (one object per line)::

    {
      "schema_version": 1,
      "study_id": "s000042",
      "findings_text": "There is a pleural effusion. ...",
      "labels": {"Atelectasis": 0.0, ..., "Support Devices": 1.0},   # all 14 keys
      "observation": {"Atelectasis": "negative", ...},                 # optional
      "split": "train" | "val" | "test"                                 # optional
    }

Unknown keys are carried through a read/write round trip unchanged.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .labels import CATEGORIES, N_CATEGORIES, NO_FINDING, LabelValue, LabelVector, Provenance, SchemaReport, label_vector_from_json_map
from .metrics import tokenize

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")


class Evidence(enum.IntEnum):
    POSITIVE = 0
    NEGATIVE = 1
    AMBIGUOUS = 2


N_EVIDENCE = len(Evidence)
_EVIDENCE_NAMES = {e: e.name.lower() for e in Evidence}
_EVIDENCE_BY_NAME = {v: k for k, v in _EVIDENCE_NAMES.items()}
_CONTRADICTION = {Evidence.POSITIVE: Evidence.NEGATIVE, Evidence.NEGATIVE: Evidence.POSITIVE}
_EVIDENCE_FOR_LABEL = {
    LabelValue.POSITIVE: Evidence.POSITIVE,
    LabelValue.NEGATIVE: Evidence.NEGATIVE,
    LabelValue.UNCERTAIN: Evidence.AMBIGUOUS,
}

# (positive, negative, uncertain) sentence per category. Each sentence fires
# exactly its own category in the default lexicon, with the matching cue.
# Positive findings carry descriptors, negatives use stock phrasing.
# "No Finding" only has a positive sentence; the labeler derives it anyway.
TEMPLATES: dict[str, tuple[str | None, str | None, str | None]] = {
    "Atelectasis": ("Streaky bibasilar atelectasis is present.",
                    "The lung bases are clear without atelectasis.",
                    "Possible atelectasis at the lung bases."),
    "Cardiomegaly": ("Moderate cardiomegaly is seen.",
                     "Heart size is normal without cardiomegaly.",
                     "Possible mild cardiomegaly."),
    "Consolidation": ("Dense consolidation fills the left lower lobe.",
                      "The lungs are clear without consolidation.",
                      "Possible consolidation."),
    "Edema": ("Interstitial edema with cephalization is present.",
              "There is no pulmonary edema.",
              "Possible mild pulmonary edema."),
    "Enlarged Cardiomediastinum": ("Marked mediastinal widening is seen.",
                                   "Mediastinal contours are normal without mediastinal widening.",
                                   "Possible mediastinal widening."),
    "Fracture": ("An acute displaced rib fracture is present.",
                 "Osseous structures are intact without fracture.",
                 "Possible rib fracture."),
    "Lung Lesion": ("A spiculated nodule projects over the right upper lobe.",
                    "There is no suspicious nodule.",
                    "Possible pulmonary nodule."),
    "Lung Opacity": ("Opacity is observed in the right lower lobe.",
                     "There is no focal opacity.",
                     "Possible opacity in the right lower lobe."),
    "No Finding": ("No acute cardiopulmonary abnormality.", None, None),
    "Pleural Effusion": ("A moderate left pleural effusion layers dependently.",
                         "There is no pleural effusion.",
                         "Possible small pleural effusion."),
    "Pleural Other": ("Apical pleural thickening is present.",
                      "There is no pleural thickening.",
                      "Possible pleural thickening."),
    "Pneumonia": ("Findings are consistent with multifocal pneumonia.",
                  "There is no pneumonia.",
                  "Possible pneumonia."),
    "Pneumothorax": ("A small apical pneumothorax is present.",
                     "There is no pneumothorax.",
                     "Possible pneumothorax."),
    "Support Devices": ("A port-a-cath is in place with its tip in the expected location.",
                        "There are no support devices.",
                        "Possible support device overlying the chest."),
}

# Per-category positive rates, roughly chest X-ray prevalences.
DEFAULT_PREVALENCE: tuple[float, ...] = (
    0.15, 0.12, 0.05, 0.12, 0.05, 0.03, 0.04, 0.30, 0.0, 0.25, 0.02, 0.06, 0.04, 0.35,
)
_TEMPLATE_SLOT = {LabelValue.POSITIVE: 0, LabelValue.NEGATIVE: 1, LabelValue.UNCERTAIN: 2}


class CorpusFormatError(ValueError):
    def __init__(self, path, line_no: int, problem: str):
        super().__init__(f"{path}:{line_no}: {problem}")
        self.path, self.line_no, self.problem = str(path), line_no, problem


@dataclass
class StudyRecord:
    study_id: str
    findings_text: str
    labels: LabelVector
    observation: tuple[Evidence, ...] | None = None
    split: str = "train"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.findings_text or not self.findings_text.strip():
            raise ValueError(f"{self.study_id}: findings_text must be non-empty")
        if self.labels.provenance is not Provenance.GROUND_TRUTH:
            self.labels = self.labels.with_provenance(Provenance.GROUND_TRUTH)
        if self.observation is not None and len(self.observation) != N_CATEGORIES:
            raise ValueError(f"{self.study_id}: observation needs {N_CATEGORIES} symbols")

    def to_json(self) -> dict:
        d = dict(self.extra)
        d.update({
            "schema_version": SCHEMA_VERSION,
            "study_id": self.study_id,
            "findings_text": self.findings_text,
            "labels": self.labels.to_json_map(),
            "split": self.split,
        })
        if self.observation is not None:
            d["observation"] = {name: _EVIDENCE_NAMES[e] for name, e in zip(CATEGORIES, self.observation)}
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "StudyRecord":
        """Raise ValueError with a human-readable reason on schema violations."""
        if not isinstance(d, Mapping):
            raise ValueError("record is not a JSON object")
        for key in ("study_id", "findings_text", "labels"):
            if key not in d:
                raise ValueError(f"missing {key!r}")
        if not isinstance(d["labels"], Mapping):
            raise ValueError("'labels' must be an object")
        labels = label_vector_from_json_map(d["labels"], Provenance.GROUND_TRUTH)
        if isinstance(labels, SchemaReport):
            raise ValueError(f"bad labels: missing={list(labels.missing)} unknown={list(labels.unknown)} "
                             f"out_of_range={[k for k, _ in labels.out_of_range]}")
        obs = None
        if d.get("observation") is not None:
            raw = d["observation"]
            try:
                obs = tuple(_EVIDENCE_BY_NAME[raw[name]] for name in CATEGORIES)
            except (KeyError, TypeError) as exc:
                raise ValueError(f"bad observation: {exc}") from None
        split = d.get("split", "train")
        if split not in SPLITS:
            raise ValueError(f"bad split {split!r}")
        known = {"schema_version", "study_id", "findings_text", "labels", "observation", "split"}
        extra = {k: v for k, v in d.items() if k not in known}
        return cls(str(d["study_id"]), d["findings_text"], labels, obs, split, extra)


@dataclass(frozen=True)
class CorpusSpec:
    n_studies: int = 200
    p_positive: float | Sequence[float] = DEFAULT_PREVALENCE
    p_uncertain: float | Sequence[float] = 0.03
    p_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_studies < 0:
            raise ValueError("n_studies must be >= 0")
        pos, unc = self.marginals()
        if not (0 <= self.p_noise <= 1):
            raise ValueError("p_noise must be in [0, 1]")
        if ((pos < 0) | (unc < 0) | (pos + unc > 1)).any():
            raise ValueError("label marginals must be probabilities with p_positive + p_uncertain <= 1")

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        pos = np.broadcast_to(np.asarray(self.p_positive, dtype=float), (N_CATEGORIES,)).copy()
        unc = np.broadcast_to(np.asarray(self.p_uncertain, dtype=float), (N_CATEGORIES,)).copy()
        pos[NO_FINDING] = unc[NO_FINDING] = 0.0
        return pos, unc

    @classmethod
    def from_json(cls, d: Mapping) -> "CorpusSpec":
        return cls(**{k: d[k] for k in ("n_studies", "p_positive", "p_uncertain", "p_noise", "seed") if k in d})


def sentence_for(category: str, value: LabelValue) -> str | None:
    return TEMPLATES[category][_TEMPLATE_SLOT[value]]


def generate_report(labels: LabelVector) -> str:
    """Templated findings text whose extracted labels equal ``labels``."""
    sentences = []
    if labels[NO_FINDING] is LabelValue.POSITIVE:
        sentences.append(TEMPLATES["No Finding"][0])
    for i, name in enumerate(CATEGORIES):
        if i != NO_FINDING:
            sentences.append(sentence_for(name, labels[i]))
    return " ".join(sentences)


def assign_split(study_id: str, seed: int, fractions=(0.8, 0.1, 0.1)) -> str:
    digest = hashlib.sha256(f"{seed}:{study_id}".encode()).digest()
    u = int.from_bytes(digest[:8], "big") / 2.0 ** 64
    edges = np.cumsum(fractions)
    for name, edge in zip(SPLITS, edges):
        if u < edge:
            return name
    return SPLITS[-1]


def observe(labels: LabelVector, p_noise: float, rng: np.random.Generator) -> tuple[Evidence, ...]:
    """Evidence symbols for a label vector.

    With probability ``p_noise`` a symbol contradicts its label: positive and
    negative evidence swap, and an uncertain label gets a random definite symbol.
    """
    out = []
    for v in labels:
        e = _EVIDENCE_FOR_LABEL[v]
        flip = rng.random() < p_noise
        coin = int(rng.integers(2))
        if flip:
            e = _CONTRADICTION.get(e, (Evidence.POSITIVE, Evidence.NEGATIVE)[coin])
        out.append(e)
    return tuple(out)


def generate_corpus(spec: CorpusSpec) -> list[StudyRecord]:
    rng = np.random.default_rng(spec.seed)
    pos, unc = spec.marginals()
    records = []
    for k in range(spec.n_studies):
        u = rng.random(N_CATEGORIES)
        values = [LabelValue.POSITIVE if u[i] < pos[i]
                  else LabelValue.UNCERTAIN if u[i] < pos[i] + unc[i]
                  else LabelValue.NEGATIVE for i in range(N_CATEGORIES)]
        normal = all(v is LabelValue.NEGATIVE for i, v in enumerate(values) if i != NO_FINDING)
        values[NO_FINDING] = LabelValue.POSITIVE if normal else LabelValue.NEGATIVE
        labels = LabelVector(tuple(values), Provenance.GROUND_TRUTH)
        sid = f"s{k:06d}"
        records.append(StudyRecord(sid, generate_report(labels), labels,
                                   observe(labels, spec.p_noise, rng), assign_split(sid, spec.seed)))
    return records


def write_jsonl(records: Iterable[StudyRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def read_jsonl(path: str | Path) -> list[StudyRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(StudyRecord.from_json(json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise CorpusFormatError(path, line_no, str(exc)) from None
    return records


@dataclass(frozen=True)
class IdfTable:
    """Smoothed inverse document frequency, ``log((N+1)/(df+1)) + 1``."""

    n_docs: int = 0
    df: Mapping[str, int] = field(default_factory=dict)

    def __call__(self, token: str) -> float:
        return math.log((self.n_docs + 1) / (self.df.get(token, 0) + 1)) + 1.0

    def to_json(self) -> dict:
        return {"n_docs": self.n_docs, "df": dict(sorted(self.df.items()))}

    @classmethod
    def from_json(cls, d: Mapping) -> "IdfTable":
        return cls(int(d["n_docs"]), {str(k): int(v) for k, v in d["df"].items()})


def build_idf(texts: Iterable[str | StudyRecord]) -> IdfTable:
    df: Counter = Counter()
    n = 0
    for t in texts:
        text = t.findings_text if isinstance(t, StudyRecord) else t
        df.update(set(tokenize(text)))
        n += 1
    return IdfTable(n, dict(df))
