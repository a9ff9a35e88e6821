"""Train/eval contamination detection.

Two matching modes, one per corpus convention:

- youtube_id: training-corpus audio named ``Y<id>.wav`` is normalized
  back to the raw 11-character YouTube id before set intersection;
  anything not matching that shape passes through unchanged but flagged,
  never dropped (dropping would hide data problems).
- filename: case-insensitive exact matching after trimming; no fuzzy
  author/duration matching.

Reports carry the eval-side overlap percentage, the number of
duplicated caption rows it implies, and the train-side percentage.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

from .embedstore import DatasetManifest
from .errors import BenchError

KINDS = ("youtube_id", "filename")

_WAVCAPS_ID = re.compile(r"^Y(.{11})\.wav$")


class LeakageError(BenchError):
    """Bad corpus index construction or mismatched comparison."""


class NormalizedId(NamedTuple):
    key: str
    conforming: bool


def normalize_wavcaps_id(raw: str) -> NormalizedId:
    """Strip the ``Y`` prefix and ``.wav`` suffix of an 11-char YouTube id.

    Non-conforming names are returned unchanged with conforming=False.
    """
    if not raw:
        raise LeakageError("empty id")
    match = _WAVCAPS_ID.match(raw)
    if match:
        return NormalizedId(match.group(1), True)
    return NormalizedId(raw, False)


def normalize_filename(raw: str) -> str:
    """Lowercase and trim surrounding whitespace; extension preserved."""
    if not raw:
        raise LeakageError("empty filename")
    key = raw.strip().lower()
    if not key:
        raise LeakageError(f"filename {raw!r} is all whitespace")
    return key


def _normalize(kind: str, raw: str) -> NormalizedId:
    if kind == "youtube_id":
        return normalize_wavcaps_id(raw)
    if kind == "filename":
        return NormalizedId(normalize_filename(raw), True)
    raise LeakageError(f"unknown index kind {kind!r}; expected one of {KINDS}")


@dataclass(frozen=True, eq=False)
class CorpusIndex:
    """Normalized key set with per-key caption multiplicity."""

    kind: str
    entries: frozenset[str]
    raw_count: int
    multiplicity: dict[str, int]
    non_conforming: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise LeakageError(f"unknown index kind {self.kind!r}")
        if set(self.multiplicity) != set(self.entries):
            raise LeakageError("multiplicity keys do not match entries")
        for key, count in self.multiplicity.items():
            if not key:
                raise LeakageError("empty key in index")
            if count < 1:
                raise LeakageError(f"non-positive multiplicity for {key!r}")


def index_from_keys(kind: str, raw_keys: Iterable[str]) -> CorpusIndex:
    """Build an index from raw id/filename strings.

    Repeated raw keys accumulate multiplicity (a key seen five times is
    five caption rows on that side).
    """
    multiplicity: dict[str, int] = {}
    non_conforming: set[str] = set()
    raw_count = 0
    for raw in raw_keys:
        raw_count += 1
        normalized = _normalize(kind, raw)
        if not normalized.conforming:
            non_conforming.add(normalized.key)
        multiplicity[normalized.key] = multiplicity.get(normalized.key, 0) + 1
    return CorpusIndex(
        kind,
        frozenset(multiplicity),
        raw_count,
        multiplicity,
        frozenset(non_conforming),
    )


def index_from_manifest(kind: str, manifest: DatasetManifest) -> CorpusIndex:
    """Index a dataset manifest: keys are clip ids, multiplicity the
    caption count per clip (minimum 1 for caption-less clips)."""
    multiplicity: dict[str, int] = {}
    non_conforming: set[str] = set()
    for clip in manifest.clips:
        normalized = _normalize(kind, clip.clip_id)
        if not normalized.conforming:
            non_conforming.add(normalized.key)
        multiplicity[normalized.key] = multiplicity.get(
            normalized.key, 0
        ) + max(len(clip.captions), 1)
    return CorpusIndex(
        kind,
        frozenset(multiplicity),
        len(manifest.clips),
        multiplicity,
        frozenset(non_conforming),
    )


def read_keys(path: str | Path) -> list[str]:
    """Raw keys from a line-delimited file; blank lines skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [line for line in lines if line.strip()]


@dataclass(frozen=True)
class OverlapReport:
    kind: str
    overlap_keys: frozenset[str]
    clip_overlap_pct: float
    duplicated_caption_rows: int
    train_side_pct: float
    eval_unique: int
    train_unique: int

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "overlap_count": len(self.overlap_keys),
            "eval_unique": self.eval_unique,
            "train_unique": self.train_unique,
            "clip_overlap_pct": self.clip_overlap_pct,
            "duplicated_caption_rows": self.duplicated_caption_rows,
            "train_side_pct": self.train_side_pct,
            "overlap_keys": sorted(self.overlap_keys),
        }


def overlap_report(
    eval_index: CorpusIndex, train_index: CorpusIndex
) -> OverlapReport:
    """Intersect two normalized-key indexes and quantify the damage.

    clip_overlap_pct is relative to unique eval keys, train_side_pct to
    unique train keys; duplicated_caption_rows sums the eval caption
    multiplicity over overlapping keys.
    """
    if eval_index.kind != train_index.kind:
        raise LeakageError(
            f"kind mismatch: eval {eval_index.kind!r} vs "
            f"train {train_index.kind!r}"
        )
    if not eval_index.entries or not train_index.entries:
        raise LeakageError("cannot compute overlap against an empty index")
    overlap = eval_index.entries & train_index.entries
    rows = sum(eval_index.multiplicity[key] for key in overlap)
    return OverlapReport(
        kind=eval_index.kind,
        overlap_keys=frozenset(overlap),
        clip_overlap_pct=100.0 * len(overlap) / len(eval_index.entries),
        duplicated_caption_rows=rows,
        train_side_pct=100.0 * len(overlap) / len(train_index.entries),
        eval_unique=len(eval_index.entries),
        train_unique=len(train_index.entries),
    )


def emit_blocklist(report: OverlapReport, path: str | Path) -> None:
    """One normalized key per line, sorted; empty overlap, empty file."""
    Path(path).write_text(
        "".join(f"{key}\n" for key in sorted(report.overlap_keys)),
        encoding="utf-8",
    )
