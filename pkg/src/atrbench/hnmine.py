"""Four-stage hard-negative mining: acoustically close, semantically far.

Per target clip:

1. top-K audio-cosine neighbors (self excluded),
2. keep the ceil(stage2_multiplier x final_count) highest-acoustic
   candidates; the similarity of the last one kept is the realized
   acoustic floor for that target,
3. caption-embedding cosine for each survivor,
4. keep the final_count candidates with LOWEST semantic similarity.

Targets left with fewer than final_count candidates after stage 2
become per-target failure records; they are skipped and reported, never
padded with fabricated pairs. All ties break by lexicographic candidate
id, and targets are processed in sorted id order, so output is invariant
under permutation of the input corpus.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .embedstore import DatasetManifest, EmbeddingSet
from .errors import BenchError

log = logging.getLogger(__name__)

# Pairs whose surviving semantic similarity is this high get flagged:
# the captions are near-identical and the pair is a dubious negative.
HIGH_SEMANTIC_SIM = 0.999
FLAG_HIGH_SEMANTIC = "high_semantic_sim"


class MiningError(BenchError):
    """Bad mining inputs or an inconsistent review file."""


@dataclass(frozen=True)
class MiningConfig:
    """Stage sizes: candidate pool K, stage-2 retention multiplier, and
    the number of pairs to emit per target."""

    k_candidates: int = 20
    stage2_multiplier: float = 3.0
    final_count_per_target: int = 1

    def __post_init__(self) -> None:
        if self.final_count_per_target < 1:
            raise MiningError("final_count_per_target must be >= 1")
        if self.k_candidates < self.final_count_per_target:
            raise MiningError(
                f"k_candidates {self.k_candidates} < final_count_per_target "
                f"{self.final_count_per_target}"
            )
        if not self.stage2_multiplier >= 1.0:
            raise MiningError("stage2_multiplier must be >= 1.0")

    @property
    def stage2_target(self) -> int:
        """Candidates stage 2 tries to retain (before availability)."""
        return math.ceil(self.stage2_multiplier * self.final_count_per_target)


@dataclass(frozen=True)
class MinedPair:
    target_id: str
    hn_id: str
    acoustic_sim: float
    semantic_sim: float
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.target_id == self.hn_id:
            raise MiningError(f"pair with target == hn: {self.target_id!r}")
        if not (math.isfinite(self.acoustic_sim) and math.isfinite(self.semantic_sim)):
            raise MiningError(
                f"non-finite similarity for pair "
                f"({self.target_id!r}, {self.hn_id!r})"
            )


@dataclass(frozen=True)
class MiningFailure:
    target_id: str
    reason: str
    stage1_count: int
    stage2_count: int


@dataclass(frozen=True)
class TargetStages:
    """Realized stage cardinalities and acoustic floor for one target."""

    target_id: str
    stage1_count: int
    stage2_count: int
    acoustic_floor: Optional[float]


@dataclass
class MiningResult:
    pairs: list[MinedPair]
    failures: list[MiningFailure]
    stages: list[TargetStages]


def mine_pairs(
    audio_emb: EmbeddingSet,
    text_emb: EmbeddingSet,
    manifest: DatasetManifest,
    cfg: MiningConfig,
) -> MiningResult:
    """Run the four-stage pipeline over every clip in the manifest.

    Both embedding sets are keyed by clip id; text_emb holds the one
    designated caption embedding per clip. Output pairs are sorted by
    target id, then descending acoustic similarity.
    """
    if not audio_emb.normalized or not text_emb.normalized:
        raise MiningError("mine_pairs requires normalized embedding sets")
    targets = sorted(c.clip_id for c in manifest.clips)
    for clip_id in targets:
        if clip_id not in audio_emb:
            raise MiningError(f"clip {clip_id!r} missing from audio embeddings")
        if clip_id not in text_emb:
            raise MiningError(f"clip {clip_id!r} missing from text embeddings")

    ids = np.array(targets)
    audio = audio_emb.data[audio_emb.row_indices(targets)]
    text = text_emb.data[text_emb.row_indices(targets)]
    acoustic = audio @ audio.T  # float32, canonical sorted-id order

    n = len(targets)
    pairs: list[MinedPair] = []
    failures: list[MiningFailure] = []
    stages: list[TargetStages] = []

    for t_pos in range(n):
        others = np.concatenate([np.arange(t_pos), np.arange(t_pos + 1, n)])
        sims = acoustic[t_pos, others]
        # Descending similarity, ties by ascending candidate id.
        order = np.lexsort((ids[others], -sims))

        stage1 = others[order][: cfg.k_candidates]
        stage1_sims = sims[order][: cfg.k_candidates]
        stage2_n = min(cfg.stage2_target, len(stage1))
        retained = stage1[:stage2_n]
        retained_sims = stage1_sims[:stage2_n]
        floor = float(retained_sims[-1]) if stage2_n else None
        stages.append(
            TargetStages(targets[t_pos], len(stage1), stage2_n, floor)
        )

        if stage2_n < cfg.final_count_per_target:
            failures.append(
                MiningFailure(
                    targets[t_pos],
                    f"only {stage2_n} candidates survive the acoustic "
                    f"stages, need {cfg.final_count_per_target}",
                    len(stage1),
                    stage2_n,
                )
            )
            continue

        semantic = text[retained] @ text[t_pos]
        # Ascending semantic similarity, ties by ascending candidate id.
        sem_order = np.lexsort((ids[retained], semantic))
        chosen = sem_order[: cfg.final_count_per_target]

        emitted = []
        for pos in chosen:
            sem = float(semantic[pos])
            flags = (FLAG_HIGH_SEMANTIC,) if sem >= HIGH_SEMANTIC_SIM else ()
            emitted.append(
                MinedPair(
                    targets[t_pos],
                    str(ids[retained][pos]),
                    float(retained_sims[pos]),
                    sem,
                    flags,
                )
            )
        emitted.sort(key=lambda p: (-p.acoustic_sim, p.hn_id))
        pairs.extend(emitted)

    return MiningResult(pairs, failures, stages)


@dataclass(frozen=True)
class PairReview:
    target_id: str
    hn_id: str
    accepted: bool


def verify_pairs(
    pairs: Sequence[MinedPair], reviews: Sequence[PairReview]
) -> list[MinedPair]:
    """Drop pairs a reviewer rejected; keep everything unreviewed.

    Any rejection wins over a duplicate acceptance of the same pair.
    Removals are logged for provenance.
    """
    known = {(p.target_id, p.hn_id) for p in pairs}
    rejected: set[tuple[str, str]] = set()
    for review in reviews:
        key = (review.target_id, review.hn_id)
        if key not in known:
            raise MiningError(
                f"review references unknown pair "
                f"({review.target_id!r}, {review.hn_id!r})"
            )
        if not review.accepted:
            rejected.add(key)
    kept = [p for p in pairs if (p.target_id, p.hn_id) not in rejected]
    for target_id, hn_id in sorted(rejected):
        log.info("review rejected pair (%s, %s)", target_id, hn_id)
    return kept


def write_pairs(pairs: Sequence[MinedPair], path: str | Path) -> None:
    """Line-delimited pair records (see docs/FORMATS.md)."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for p in pairs:
            handle.write(
                json.dumps(
                    {
                        "target_id": p.target_id,
                        "hn_id": p.hn_id,
                        "acoustic_sim": p.acoustic_sim,
                        "semantic_sim": p.semantic_sim,
                        "flags": list(p.flags),
                    }
                )
                + "\n"
            )


def read_pairs(path: str | Path) -> list[MinedPair]:
    pairs: list[MinedPair] = []
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append(
                    MinedPair(
                        str(obj["target_id"]),
                        str(obj["hn_id"]),
                        float(obj["acoustic_sim"]),
                        float(obj["semantic_sim"]),
                        tuple(obj.get("flags", [])),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise MiningError(f"{path}:{line_no}: bad pair record: {exc}") from exc
    return pairs


def read_reviews(path: str | Path) -> list[PairReview]:
    reviews: list[PairReview] = []
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                reviews.append(
                    PairReview(
                        str(obj["target_id"]),
                        str(obj["hn_id"]),
                        bool(obj["accepted"]),
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise MiningError(
                    f"{path}:{line_no}: bad review record: {exc}"
                ) from exc
    return reviews


def write_failures(failures: Sequence[MiningFailure], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for f in failures:
            handle.write(
                json.dumps(
                    {
                        "target_id": f.target_id,
                        "reason": f.reason,
                        "stage1_count": f.stage1_count,
                        "stage2_count": f.stage2_count,
                    }
                )
                + "\n"
            )
