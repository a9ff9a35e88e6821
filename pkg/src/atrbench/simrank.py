"""Brute-force cosine scoring and exact, deterministic ranking.

Everything downstream (metrics, mining, the harness) consumes this
module, so the contract is strict: scores are exact dot products stored
in 32 bits, ranks come from a fixed tie-breaking rule (descending
score, ties by ascending doc index), and results never depend on the
worker count.

Worker-count independence is by construction: query rows are always
processed in fixed-size blocks (ROW_BLOCK rows), so the sequence of
matrix products is identical whether one thread or eight consume the
blocks. Only the preallocated output slots differ in who fills them.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .embedstore import EmbeddingSet
from .errors import BenchError

# Rows per scoring block. Fixed regardless of thread count so the exact
# same GEMM calls happen for any --threads value.
ROW_BLOCK = 256

# Unit-norm inputs can only exceed |1| by accumulated rounding.
SCORE_BOUND_TOL = 1e-5


class SimilarityError(BenchError):
    """Bad inputs to scoring or ranking."""


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """scores[q][d] = sim(query q, doc d), 32-bit, row-major."""

    query_ids: tuple[str, ...]
    doc_ids: tuple[str, ...]
    scores: np.ndarray
    _query_index: dict[str, int] = field(init=False, repr=False)
    _doc_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        scores = np.ascontiguousarray(self.scores, dtype=np.float32)
        if scores.shape != (len(self.query_ids), len(self.doc_ids)):
            raise SimilarityError(
                f"scores shape {scores.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.doc_ids)} docs"
            )
        if scores.size and not np.isfinite(scores).all():
            raise SimilarityError("non-finite similarity score")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "query_ids", tuple(self.query_ids))
        object.__setattr__(self, "doc_ids", tuple(self.doc_ids))
        object.__setattr__(
            self, "_query_index", {q: i for i, q in enumerate(self.query_ids)}
        )
        object.__setattr__(
            self, "_doc_index", {d: i for i, d in enumerate(self.doc_ids)}
        )

    def query_row(self, query_id: str) -> np.ndarray:
        try:
            return self.scores[self._query_index[query_id]]
        except KeyError:
            raise SimilarityError(f"unknown query id {query_id!r}") from None

    def doc_index(self, doc_id: str) -> int:
        try:
            return self._doc_index[doc_id]
        except KeyError:
            raise SimilarityError(f"unknown doc id {doc_id!r}") from None


@dataclass(frozen=True)
class RankOutcome:
    """1-based ranks of the target (and optional hard negative) doc."""

    query_id: str
    target_rank: int
    hn_rank: Optional[int] = None

    def __post_init__(self) -> None:
        if self.target_rank < 1:
            raise SimilarityError(
                f"query {self.query_id!r}: target_rank must be >= 1"
            )
        if self.hn_rank is not None:
            if self.hn_rank < 1:
                raise SimilarityError(
                    f"query {self.query_id!r}: hn_rank must be >= 1"
                )
            if self.hn_rank == self.target_rank:
                raise SimilarityError(
                    f"query {self.query_id!r}: hn_rank equals target_rank "
                    f"({self.target_rank}); target and hard negative must "
                    f"be distinct docs"
                )


def cosine_matrix(
    queries: EmbeddingSet, docs: EmbeddingSet, threads: int = 1
) -> SimilarityMatrix:
    """Exact pairwise dot products of two unit-norm sets."""
    if not queries.normalized or not docs.normalized:
        raise SimilarityError("cosine_matrix requires normalized inputs")
    if queries.dim != docs.dim:
        raise SimilarityError(
            f"dimension mismatch: queries dim {queries.dim}, docs dim {docs.dim}"
        )
    n_q = len(queries)
    scores = np.empty((n_q, len(docs)), dtype=np.float32)
    doc_t = docs.data.T
    starts = range(0, n_q, ROW_BLOCK)

    def fill(start: int) -> None:
        stop = min(start + ROW_BLOCK, n_q)
        scores[start:stop] = queries.data[start:stop] @ doc_t

    if threads > 1 and n_q > ROW_BLOCK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, starts))
    else:
        for start in starts:
            fill(start)

    if scores.size and float(np.abs(scores).max()) > 1.0 + SCORE_BOUND_TOL:
        raise SimilarityError("cosine score outside [-1, 1] tolerance band")
    return SimilarityMatrix(queries.ids, docs.ids, scores)


def rank_of(sim_row: np.ndarray, item_index: int) -> int:
    """1-based rank of one doc under descending score, ties by index.

    rank = 1 + |{j : score[j] > score[item]}|
             + |{j : score[j] == score[item] and j < item_index}|
    """
    row = np.asarray(sim_row)
    if row.ndim != 1:
        raise SimilarityError("sim_row must be 1-D")
    if not 0 <= item_index < row.shape[0]:
        raise SimilarityError(
            f"item_index {item_index} out of range for {row.shape[0]} docs"
        )
    if not np.isfinite(row).all():
        raise SimilarityError("non-finite score in sim_row")
    value = row[item_index]
    greater = int(np.count_nonzero(row > value))
    ties_before = int(np.count_nonzero(row[:item_index] == value))
    return 1 + greater + ties_before


def rank_outcomes(
    sim: SimilarityMatrix,
    pairing: Mapping[str, tuple[str, Optional[str]]],
) -> list[RankOutcome]:
    """Rank the paired target (and optional hard negative) per query.

    ``pairing`` maps every query id in ``sim`` to a (target_doc_id,
    hard_negative_doc_id or None) tuple. Output order follows
    sim.query_ids.
    """
    outcomes: list[RankOutcome] = []
    for q_pos, query_id in enumerate(sim.query_ids):
        try:
            target_id, hn_id = pairing[query_id]
        except KeyError:
            raise SimilarityError(
                f"no pairing entry for query {query_id!r}"
            ) from None
        row = sim.scores[q_pos]
        target_rank = rank_of(row, sim.doc_index(target_id))
        hn_rank = None
        if hn_id is not None:
            hn_rank = rank_of(row, sim.doc_index(hn_id))
        outcomes.append(RankOutcome(query_id, target_rank, hn_rank))
    return outcomes
