"""Discrimination and recall metrics over rank outcomes.

All rate metrics are percentages in [0, 100]; the rank-separation mean
(delta-rank) is unbounded. Internal math keeps full precision; the
2-decimal half-up rounding happens only at presentation via
format_value. Empty outcome lists are errors, never 0% or 100%: a
silent degenerate value would poison cross-dataset means.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, NamedTuple, Optional, Sequence

from .errors import BenchError
from .simrank import RankOutcome

METRIC_RECALL = "r"
METRIC_HNSR = "hnsr"
METRIC_TFR = "tfr"
METRIC_TFR_HN = "tfr_hn"
METRIC_DELTA_RANK = "delta_rank"

RATE_METRICS = frozenset(
    {METRIC_RECALL, METRIC_HNSR, METRIC_TFR, METRIC_TFR_HN}
)
ALL_METRICS = RATE_METRICS | {METRIC_DELTA_RANK}

# Whether the metric takes a cutoff k: "always", "never", or "optional"
# (plain HNSR is the same statistic family as HNSR@k without a cutoff).
_K_ARITY = {
    METRIC_RECALL: "always",
    METRIC_HNSR: "optional",
    METRIC_TFR: "never",
    METRIC_TFR_HN: "always",
    METRIC_DELTA_RANK: "never",
}

DIRECTIONS = ("T2A", "T2T")

# Reserved dataset label for cross-dataset means.
MEAN_DATASET_LABEL = "mean"


class MetricError(BenchError):
    """Bad metric inputs or an inconsistent report."""


def _checked(outcomes: Sequence[RankOutcome], need_hn: bool) -> Sequence[RankOutcome]:
    if not outcomes:
        raise MetricError("empty outcome list")
    if need_hn:
        for o in outcomes:
            if o.hn_rank is None:
                raise MetricError(
                    f"query {o.query_id!r} has no hard-negative rank"
                )
    return outcomes


def _check_k(k: int) -> int:
    if not isinstance(k, int) or isinstance(k, bool) or k < 1:
        raise MetricError(f"k must be a positive integer, got {k!r}")
    return k


def recall_at_k(outcomes: Sequence[RankOutcome], k: int) -> float:
    """Percentage of queries whose target ranks within the top k."""
    _checked(outcomes, need_hn=False)
    _check_k(k)
    hits = sum(1 for o in outcomes if o.target_rank <= k)
    return 100.0 * hits / len(outcomes)


def hnsr_at_k(outcomes: Sequence[RankOutcome], k: int) -> float:
    """Percentage with target inside top-k AND hard negative outside."""
    _checked(outcomes, need_hn=True)
    _check_k(k)
    hits = sum(
        1 for o in outcomes if o.target_rank <= k and o.hn_rank > k
    )
    return 100.0 * hits / len(outcomes)


def hnsr(outcomes: Sequence[RankOutcome]) -> float:
    """Percentage with the hard negative ranked below the target."""
    _checked(outcomes, need_hn=True)
    hits = sum(1 for o in outcomes if o.hn_rank > o.target_rank)
    return 100.0 * hits / len(outcomes)


def tfr(outcomes: Sequence[RankOutcome]) -> float:
    """Percentage with the target ranked first."""
    _checked(outcomes, need_hn=False)
    hits = sum(1 for o in outcomes if o.target_rank == 1)
    return 100.0 * hits / len(outcomes)


def tfr_hn_at_k(outcomes: Sequence[RankOutcome], k: int) -> float:
    """Percentage with target first AND hard negative outside top-k."""
    _checked(outcomes, need_hn=True)
    _check_k(k)
    hits = sum(
        1 for o in outcomes if o.target_rank == 1 and o.hn_rank > k
    )
    return 100.0 * hits / len(outcomes)


def delta_rank(outcomes: Sequence[RankOutcome]) -> float:
    """Arithmetic mean of (hard-negative rank - target rank)."""
    _checked(outcomes, need_hn=True)
    return math.fsum(o.hn_rank - o.target_rank for o in outcomes) / len(outcomes)


class MetricKey(NamedTuple):
    dataset: str
    model: str
    query_type: str
    direction: str
    metric: str
    k: Optional[int] = None


def display_metric(metric: str, k: Optional[int]) -> str:
    """Human-facing label, e.g. R@5, HNSR, TFR-HN@10, Delta-Rank."""
    base = {
        METRIC_RECALL: "R",
        METRIC_HNSR: "HNSR",
        METRIC_TFR: "TFR",
        METRIC_TFR_HN: "TFR-HN",
        METRIC_DELTA_RANK: "Delta-Rank",
    }[metric]
    return f"{base}@{k}" if k is not None else base


def format_value(value: float) -> str:
    """Presentation rounding: 2 decimal places, half-up.

    Rounds the shortest decimal repr of the float, not its exact binary
    expansion, so e.g. 66.66666666666667 -> "66.67" and 0.125 -> "0.13".
    """
    quantized = Decimal(repr(float(value))).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return str(quantized)


def _check_key(key: MetricKey) -> None:
    if key.metric not in ALL_METRICS:
        raise MetricError(f"unknown metric {key.metric!r}")
    if key.direction not in DIRECTIONS:
        raise MetricError(f"unknown direction {key.direction!r}")
    arity = _K_ARITY[key.metric]
    if arity == "always" and key.k is None:
        raise MetricError(f"metric {key.metric!r} requires a cutoff k")
    if arity == "never" and key.k is not None:
        raise MetricError(f"metric {key.metric!r} takes no cutoff k")
    if key.k is not None:
        _check_k(key.k)


@dataclass
class MetricReport:
    """Keyed metric values plus the query count behind each value."""

    entries: dict[MetricKey, float] = field(default_factory=dict)
    counts: dict[MetricKey, int] = field(default_factory=dict)

    def add(self, key: MetricKey, value: float, count: int) -> None:
        _check_key(key)
        value = float(value)
        if not math.isfinite(value):
            raise MetricError(f"non-finite value for {key}")
        if key.metric in RATE_METRICS and not 0.0 <= value <= 100.0:
            raise MetricError(
                f"rate metric {key.metric!r} outside [0, 100]: {value}"
            )
        if count < 1:
            raise MetricError(f"count must be positive for {key}")
        if key in self.entries:
            raise MetricError(f"duplicate report key {key}")
        self.entries[key] = value
        self.counts[key] = int(count)

    def merge(self, other: "MetricReport") -> None:
        for key, value in other.entries.items():
            self.add(key, value, other.counts[key])

    def sorted_keys(self) -> list[MetricKey]:
        return sorted(
            self.entries,
            key=lambda key: (
                key.dataset,
                key.model,
                key.direction,
                key.query_type,
                key.metric,
                key.k if key.k is not None else 0,
            ),
        )

    def to_records(self) -> list[dict]:
        """Flat rows for line-delimited serialization."""
        rows = []
        for key in self.sorted_keys():
            rows.append(
                {
                    "dataset": key.dataset,
                    "model": key.model,
                    "query_type": key.query_type,
                    "direction": key.direction,
                    "metric": key.metric,
                    "k": key.k,
                    "value": self.entries[key],
                    "display": format_value(self.entries[key]),
                    "count": self.counts[key],
                }
            )
        return rows


def aggregate_mean(
    reports: Sequence[MetricReport], dataset_label: str = MEAN_DATASET_LABEL
) -> MetricReport:
    """Unweighted per-key arithmetic mean across per-dataset reports.

    Keys must agree across reports once the dataset field is ignored;
    any mismatch is an error rather than a partial mean.
    """
    if not reports:
        raise MetricError("aggregate_mean needs at least one report")
    projected: list[dict[MetricKey, tuple[float, int]]] = []
    for report in reports:
        flat: dict[MetricKey, tuple[float, int]] = {}
        for key, value in report.entries.items():
            merged = key._replace(dataset=dataset_label)
            if merged in flat:
                raise MetricError(
                    f"report holds {merged} under two dataset names; "
                    f"pass one report per dataset"
                )
            flat[merged] = (value, report.counts[key])
        projected.append(flat)

    key_set = set(projected[0])
    for flat in projected[1:]:
        if set(flat) != key_set:
            missing = key_set.symmetric_difference(flat)
            raise MetricError(
                f"reports disagree on key structure, e.g. {sorted(missing)[0]}"
            )

    out = MetricReport()
    for key in key_set:
        values = [flat[key][0] for flat in projected]
        counts = [flat[key][1] for flat in projected]
        out.add(key, math.fsum(values) / len(values), sum(counts))
    return out
