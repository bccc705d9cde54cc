"""Deterministic alignment post-pass.

The agent's poly_media_alignment label is recomputed from the two direction
fields alone; comments and raw signals are never consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping

from .model import ALIGNMENTS, MEDIA_DIRECTIONS, POLY_DIRECTIONS, InsightRecord


class RubricError(ValueError):
    pass


_DECISIVE = ("intensifying", "easing")


def _default_label(poly: str, media: str) -> str:
    if media == "no_coverage":
        return "market_leads_media"
    if poly in _DECISIVE and media in _DECISIVE:
        return "consensus" if poly == media else "divergence"
    if poly == "mixed" and media in _DECISIVE:
        return "media_leads_market"
    if media == "mixed" and poly in _DECISIVE:
        return "market_leads_media"
    return "consensus"  # both mixed


@dataclass(frozen=True)
class AlignmentRubric:
    table: Mapping[tuple[str, str], str]
    version: str

    def __post_init__(self):
        expected = set(product(POLY_DIRECTIONS, MEDIA_DIRECTIONS))
        missing = expected - set(self.table)
        extra = set(self.table) - expected
        if missing or extra:
            raise RubricError(f"rubric not total: missing={sorted(missing)} extra={sorted(extra)}")
        bad = {k: v for k, v in self.table.items() if v not in ALIGNMENTS}
        if bad:
            raise RubricError(f"labels outside the alignment vocabulary: {bad}")
        if not self.version:
            raise RubricError("rubric needs a version tag")

    def __call__(self, poly: str, media: str) -> str:
        return self.table[(poly, media)]

    @classmethod
    def default(cls) -> "AlignmentRubric":
        return cls(
            {(p, m): _default_label(p, m) for p, m in product(POLY_DIRECTIONS, MEDIA_DIRECTIONS)},
            "default-v1",
        )

    def dumps(self) -> str:
        lines = [f"version = {self.version}"]
        for p, m in product(POLY_DIRECTIONS, MEDIA_DIRECTIONS):
            lines.append(f"{p:<13} {m:<12} -> {self.table[(p, m)]}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "AlignmentRubric":
        """Parse the 12-row text table.

        One ``version = <tag>`` line, then rows ``<poly> <media> -> <label>``.
        Blank lines and ``#`` comments are ignored.
        """
        version, table = "", {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("version") and "=" in line:
                version = line.split("=", 1)[1].strip()
                continue
            lhs, sep, label = line.partition("->")
            keys = lhs.split()
            if not sep or len(keys) != 2:
                raise RubricError(f"line {lineno}: expected '<poly> <media> -> <label>'")
            if tuple(keys) in table:
                raise RubricError(f"line {lineno}: duplicate row {keys}")
            table[tuple(keys)] = label.strip()
        return cls(table, version)

    @classmethod
    def load(cls, path: str | Path) -> "AlignmentRubric":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def validate_alignment(record: InsightRecord, rubric: AlignmentRubric) -> tuple[InsightRecord, bool]:
    label = rubric(record.poly_direction, record.media_direction)
    if label == record.poly_media_alignment:
        return record, False
    return replace(record, poly_media_alignment=label), True


def validate_all(
    records: Iterable[InsightRecord], rubric: AlignmentRubric
) -> tuple[list[InsightRecord], list[str]]:
    """Validate a record set; returns the records and the ids whose label flipped."""
    out, flipped = [], []
    for r in records:
        v, changed = validate_alignment(r, rubric)
        out.append(v)
        if changed:
            flipped.append(r.cluster_id)
    return out, flipped
