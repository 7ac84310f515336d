"""The ``<think>…</think><answer>…</answer>`` output protocol.

Grammar (case-sensitive)::

    [preamble] <think> THINK </think> [whitespace] <answer> JSON-OBJECT </answer> [epilogue]

Exactly one of each tag must appear, in that order, with no nesting.
Text before ``<think>`` or after ``</answer>`` is ignored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from .labels import (
    CATEGORIES,
    LabelValue,
    LabelVector,
    Provenance,
    SchemaReport,
    label_vector_from_json_map,
)

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
_TAGS = (THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)


@dataclass(frozen=True)
class FormatFlags:
    tags_present: bool = False
    json_valid: bool = False
    schema_complete: bool = False
    ordering_ok: bool = False

    def to_dict(self) -> dict[str, bool]:
        return {
            "tags_present": self.tags_present,
            "json_valid": self.json_valid,
            "schema_complete": self.schema_complete,
            "ordering_ok": self.ordering_ok,
        }


@dataclass(frozen=True)
class StructuredOutput:
    think_text: str = ""
    answer_raw: str = ""
    answer_labels: LabelVector | None = None
    flags: FormatFlags = field(default_factory=FormatFlags)
    # Valid category entries of the answer, complete or not; empty when the
    # payload is not a JSON object.
    answer_partial: Mapping[int, LabelValue] = field(default_factory=dict, compare=False)

    def to_dict(self) -> dict:
        return {
            "think_text": self.think_text,
            "answer_raw": self.answer_raw,
            "answer_labels": None if self.answer_labels is None else self.answer_labels.to_json_map(),
            "flags": self.flags.to_dict(),
        }


class ProtocolError(ValueError):
    pass


def _locate(raw: str) -> tuple[bool, bool, tuple[int, int, int, int] | None]:
    """Return (each-tag-exactly-once, ordering_ok, tag positions)."""
    counts = [raw.count(t) for t in _TAGS]
    if counts != [1, 1, 1, 1]:
        return False, False, None
    pos = tuple(raw.index(t) for t in _TAGS)
    return True, pos[0] < pos[1] < pos[2] < pos[3], pos


def parse_output(raw: str) -> StructuredOutput:
    """Parse a model emission. Total: malformed input only clears flags."""
    if not isinstance(raw, str):
        raw = "" if raw is None else str(raw)
    unique, ordered, pos = _locate(raw)
    if not (unique and ordered):
        return StructuredOutput(flags=FormatFlags(ordering_ok=unique and ordered))

    t0, t1, a0, a1 = pos
    between = raw[t1 + len(THINK_CLOSE):a0]
    think = raw[t0 + len(THINK_OPEN):t1].strip()
    answer_raw = raw[a0 + len(ANSWER_OPEN):a1]
    # Non-whitespace between the blocks breaks the two-block structure.
    tags_present = between.strip() == ""

    json_valid = False
    labels = None
    partial: Mapping[int, LabelValue] = {}
    try:
        payload = json.loads(answer_raw)
    except (ValueError, RecursionError):
        payload = None
    if isinstance(payload, dict):
        json_valid = True
        result = label_vector_from_json_map(payload, Provenance.ANSWER_BLOCK)
        if isinstance(result, LabelVector):
            labels = result
            partial = dict(enumerate(result.values))
        else:
            assert isinstance(result, SchemaReport)
            partial = dict(result.valid)

    flags = FormatFlags(
        tags_present=tags_present,
        json_valid=json_valid,
        schema_complete=labels is not None,
        ordering_ok=True,
    )
    return StructuredOutput(think, answer_raw.strip(), labels, flags, partial)


def render_output(think: str, labels: LabelVector) -> str:
    """Emit a protocol string that parses back to ``think`` and ``labels``."""
    if not think or not think.strip():
        raise ProtocolError("think text must be non-empty")
    if any(tag in think for tag in _TAGS):
        raise ProtocolError("think text contains a protocol delimiter")
    body = json.dumps({name: v.value for name, v in zip(CATEGORIES, labels.values)}, indent=2)
    return f"{THINK_OPEN}\n{think.strip()}\n{THINK_CLOSE}\n{ANSWER_OPEN}\n{body}\n{ANSWER_CLOSE}"
