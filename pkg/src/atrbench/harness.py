"""Batch evaluation runs: wire embeddings and manifests into reports.

A run is described by a TOML config (schema in docs/FORMATS.md): one or
more datasets, each with an audio embedding file and per-model text
embedding files keyed by direction and query type. run_eval scores
every configured cell, aggregates cross-dataset means, and writes the
report bundle (line-delimited metrics and per-query ranks, rendered
tables, figures, provenance).

Determinism contract: fixed config + fixed inputs + fixed seed produce
byte-identical output files regardless of worker count. Wall time is
therefore never written into any output file; the CLI prints it.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import report as report_mod
from .embedstore import (
    QUERY_TYPES,
    DatasetManifest,
    EmbeddingSet,
    canonical_query_type,
    l2_normalize,
    load_embeddings,
    load_manifest,
)
from .errors import BenchError, ConfigError
from .metrics import (
    MEAN_DATASET_LABEL,
    METRIC_DELTA_RANK,
    METRIC_HNSR,
    METRIC_RECALL,
    METRIC_TFR,
    METRIC_TFR_HN,
    MetricKey,
    MetricReport,
    aggregate_mean,
    delta_rank,
    hnsr,
    hnsr_at_k,
    recall_at_k,
    tfr,
    tfr_hn_at_k,
)
from .simrank import RankOutcome, cosine_matrix, rank_outcomes

ENV_OUTPUT_DIR = "ATRBENCH_OUTPUT_DIR"
ENV_THREADS = "ATRBENCH_THREADS"

RECALL_MODES = ("per_query", "per_clip_max")
FORMATS = ("csv", "markdown")


class HarnessError(BenchError):
    """An evaluation cell cannot be computed."""


@dataclass(frozen=True)
class ModelConfig:
    name: str
    # (direction, query_type) -> embedding path; direction in {T2A, T2T}.
    text_paths: dict[tuple[str, str], Path]
    t2t_docs_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetConfig:
    name: str
    manifest_path: Path
    audio_path: Path
    models: tuple[ModelConfig, ...]


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple[DatasetConfig, ...]
    output_dir: Path
    ks: tuple[int, ...] = (1, 5, 10)
    t2t_doc_index: int = 0
    seed: int = 0
    threads: int = 1
    recall_mode: str = "per_query"
    formats: tuple[str, ...] = ("csv", "markdown")
    figures: bool = True
    config_path: Optional[Path] = None

    def __post_init__(self) -> None:
        if not self.datasets:
            raise ConfigError("config needs at least one dataset")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        if MEAN_DATASET_LABEL in names:
            raise ConfigError(
                f"dataset name {MEAN_DATASET_LABEL!r} is reserved for the "
                f"cross-dataset mean"
            )
        if not self.ks or any(k < 1 for k in self.ks):
            raise ConfigError("ks must be positive integers")
        if list(self.ks) != sorted(set(self.ks)):
            raise ConfigError("ks must be ascending and unique")
        if self.t2t_doc_index < 0:
            raise ConfigError("t2t_doc_index must be >= 0")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.recall_mode not in RECALL_MODES:
            raise ConfigError(
                f"recall_mode must be one of {RECALL_MODES}, "
                f"got {self.recall_mode!r}"
            )
        if not self.formats or any(f not in FORMATS for f in self.formats):
            raise ConfigError(f"formats must be a nonempty subset of {FORMATS}")


_RUN_KEYS = {
    "ks",
    "t2t_doc_index",
    "output_dir",
    "seed",
    "threads",
    "recall_mode",
    "formats",
    "figures",
}


def _as_path(base: Path, value, context: str) -> Path:
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{context} must be a non-empty path string")
    path = Path(value)
    if not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"{context}: no such file: {path}")
    return path


def _text_key(direction: str, token: str) -> tuple[str, str]:
    if token == "caption":
        return direction, "caption"
    query_type = canonical_query_type(token)
    if direction == "T2T":
        raise ConfigError(
            f"T2T supports only caption queries, got {token!r}"
        )
    return direction, query_type


def load_run_config(path: str | Path) -> RunConfig:
    """Parse and validate a TOML run config.

    Relative paths resolve against the config file's directory. The
    environment variables ATRBENCH_OUTPUT_DIR and ATRBENCH_THREADS
    override output_dir and threads (and nothing else); CLI flags
    override both the file and the environment.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: bad TOML: {exc}") from exc
    base = path.parent

    run = raw.get("run", {})
    if not isinstance(run, dict):
        raise ConfigError("[run] must be a table")
    unknown = set(run) - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown [run] keys: {sorted(unknown)}")

    datasets_raw = raw.get("dataset", [])
    if not isinstance(datasets_raw, list) or not datasets_raw:
        raise ConfigError("config needs at least one [[dataset]] table")

    datasets: list[DatasetConfig] = []
    for d_pos, ds in enumerate(datasets_raw):
        ds_name = ds.get("name")
        if not isinstance(ds_name, str) or not ds_name:
            raise ConfigError(f"dataset #{d_pos + 1}: missing name")
        context = f"dataset {ds_name!r}"
        models_raw = ds.get("model", [])
        if not isinstance(models_raw, list) or not models_raw:
            raise ConfigError(f"{context}: needs at least one [[dataset.model]]")
        models: list[ModelConfig] = []
        for m_pos, mod in enumerate(models_raw):
            m_name = mod.get("name")
            if not isinstance(m_name, str) or not m_name:
                raise ConfigError(f"{context} model #{m_pos + 1}: missing name")
            m_context = f"{context} model {m_name!r}"
            text = mod.get("text", {})
            if not isinstance(text, dict) or not text:
                raise ConfigError(f"{m_context}: needs a [dataset.model.text.*] table")
            text_paths: dict[tuple[str, str], Path] = {}
            for dir_token, table in text.items():
                direction = {"t2a": "T2A", "t2t": "T2T"}.get(dir_token)
                if direction is None:
                    raise ConfigError(
                        f"{m_context}: unknown direction {dir_token!r} "
                        f"(expected t2a or t2t)"
                    )
                if not isinstance(table, dict) or not table:
                    raise ConfigError(
                        f"{m_context}: text.{dir_token} must map query types to paths"
                    )
                for token, p in table.items():
                    key = _text_key(direction, token)
                    text_paths[key] = _as_path(
                        base, p, f"{m_context} text.{dir_token}.{token}"
                    )
            docs = mod.get("t2t_docs")
            docs_path = (
                _as_path(base, docs, f"{m_context} t2t_docs")
                if docs is not None
                else None
            )
            models.append(ModelConfig(m_name, text_paths, docs_path))
        if len({m.name for m in models}) != len(models):
            raise ConfigError(f"{context}: model names must be unique")
        datasets.append(
            DatasetConfig(
                ds_name,
                _as_path(base, ds.get("manifest"), f"{context} manifest"),
                _as_path(base, ds.get("audio"), f"{context} audio"),
                tuple(models),
            )
        )

    output_dir = run.get("output_dir")
    output_dir = os.environ.get(ENV_OUTPUT_DIR, output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        raise ConfigError(
            "output_dir is required ([run] output_dir or ATRBENCH_OUTPUT_DIR)"
        )
    out_path = Path(output_dir)
    if not out_path.is_absolute():
        out_path = base / out_path

    threads = run.get("threads", 1)
    env_threads = os.environ.get(ENV_THREADS)
    if env_threads is not None:
        try:
            threads = int(env_threads)
        except ValueError:
            raise ConfigError(f"{ENV_THREADS} must be an integer") from None

    ks_raw = run.get("ks", [1, 5, 10])
    if not isinstance(ks_raw, list) or not all(
        isinstance(k, int) and not isinstance(k, bool) for k in ks_raw
    ):
        raise ConfigError("[run] ks must be a list of integers")

    formats_raw = run.get("formats", list(FORMATS))
    if not isinstance(formats_raw, list):
        raise ConfigError("[run] formats must be a list")

    return RunConfig(
        datasets=tuple(datasets),
        output_dir=out_path,
        ks=tuple(sorted(set(ks_raw))),
        t2t_doc_index=int(run.get("t2t_doc_index", 0)),
        seed=int(run.get("seed", 0)),
        threads=int(threads),
        recall_mode=str(run.get("recall_mode", "per_query")),
        formats=tuple(dict.fromkeys(formats_raw)),
        figures=bool(run.get("figures", True)),
        config_path=path,
    )


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class _SetLoader:
    """Load-and-normalize cache so shared embedding files load once."""

    def __init__(self, digests: dict[str, str]):
        self._cache: dict[Path, EmbeddingSet] = {}
        self._digests = digests

    def get(self, path: Path) -> EmbeddingSet:
        if path not in self._cache:
            self._cache[path] = l2_normalize(load_embeddings(path))
            self._digests[str(path)] = _digest(path)
            sidecar = Path(str(path) + ".ids")
            self._digests[str(sidecar)] = _digest(sidecar)
        return self._cache[path]


def _collapse_per_clip(
    outcomes: list[RankOutcome], clip_of: dict[str, str]
) -> list[RankOutcome]:
    """Best (minimum) target rank per clip, for per_clip_max recall."""
    best: dict[str, int] = {}
    order: list[str] = []
    for o in outcomes:
        clip = clip_of[o.query_id]
        if clip not in best:
            order.append(clip)
            best[clip] = o.target_rank
        elif o.target_rank < best[clip]:
            best[clip] = o.target_rank
    return [RankOutcome(clip, best[clip]) for clip in order]


def _subset(
    text_set: EmbeddingSet, ids: list[str], context: str
) -> EmbeddingSet:
    try:
        return text_set.subset(ids)
    except BenchError as exc:
        raise HarnessError(f"{context}: {exc}") from exc


def _dump_outcomes(
    rank_rows: list[dict],
    outcomes: list[RankOutcome],
    pairing: dict[str, tuple[str, Optional[str]]],
    dataset: str,
    model: str,
    direction: str,
    query_type: str,
) -> None:
    for o in outcomes:
        target_id, hn_id = pairing[o.query_id]
        rank_rows.append(
            {
                "dataset": dataset,
                "model": model,
                "direction": direction,
                "query_type": query_type,
                "query_id": o.query_id,
                "target_id": target_id,
                "target_rank": o.target_rank,
                "hn_id": hn_id,
                "hn_rank": o.hn_rank,
            }
        )


def evaluate_t2a(
    queries: EmbeddingSet,
    audio: EmbeddingSet,
    pairing: dict[str, tuple[str, Optional[str]]],
    threads: int = 1,
) -> list[RankOutcome]:
    """Score a prepared query set against the audio corpus and rank.

    The reusable compute core of every T2A cell; exposed for direct use
    on synthetic data."""
    sim = cosine_matrix(queries, audio, threads=threads)
    return rank_outcomes(sim, pairing)


def _check_audio_covers(
    manifest: DatasetManifest, audio: EmbeddingSet, dataset: str
) -> None:
    for clip in manifest.clips:
        if clip.clip_id not in audio:
            raise HarnessError(
                f"dataset {dataset!r}: clip {clip.clip_id!r} has no audio "
                f"embedding"
            )


def run_eval(cfg: RunConfig) -> MetricReport:
    """Evaluate every configured cell and write the report bundle.

    Returns the merged report (per-dataset rows plus the cross-dataset
    mean under the dataset label "mean")."""
    digests: dict[str, str] = {}
    loader = _SetLoader(digests)
    per_dataset: list[MetricReport] = []
    rank_rows: list[dict] = []

    for ds in cfg.datasets:
        report = MetricReport()
        manifest = load_manifest(ds.manifest_path)
        digests[str(ds.manifest_path)] = _digest(ds.manifest_path)
        audio = loader.get(ds.audio_path)
        _check_audio_covers(manifest, audio, ds.name)

        for model in ds.models:
            cells = _model_cells(model)
            for direction, query_type, path in cells:
                _eval_cell(
                    report,
                    rank_rows,
                    cfg,
                    ds,
                    model,
                    manifest,
                    audio,
                    loader.get(path),
                    loader,
                    direction,
                    query_type,
                )
        per_dataset.append(report)

    merged = MetricReport()
    for report in per_dataset:
        merged.merge(report)
    merged.merge(aggregate_mean(per_dataset, MEAN_DATASET_LABEL))

    _write_outputs(cfg, merged, rank_rows, digests)
    return merged


def _model_cells(model: ModelConfig) -> list[tuple[str, str, Path]]:
    """Deterministic cell order: T2A caption, T2A UIQ types, T2T."""
    cells = []
    order = [("T2A", "caption")] + [("T2A", q) for q in QUERY_TYPES]
    order.append(("T2T", "caption"))
    for key in order:
        if key in model.text_paths:
            cells.append((key[0], key[1], model.text_paths[key]))
    return cells


def _eval_cell(
    report: MetricReport,
    rank_rows: list[dict],
    cfg: RunConfig,
    ds: DatasetConfig,
    model: ModelConfig,
    manifest: DatasetManifest,
    audio: EmbeddingSet,
    text_set: EmbeddingSet,
    loader: _SetLoader,
    direction: str,
    query_type: str,
) -> None:
    context = f"dataset {ds.name!r} model {model.name!r} {direction}/{query_type}"

    if direction == "T2A" and query_type == "caption":
        qids: list[str] = []
        clip_of: dict[str, str] = {}
        for clip in manifest.clips:
            for idx in range(len(clip.captions)):
                qid = f"{clip.clip_id}#{idx}"
                qids.append(qid)
                clip_of[qid] = clip.clip_id
        if not qids:
            raise HarnessError(f"{context}: manifest has no captions")
        pairing = {qid: (clip_of[qid], None) for qid in qids}
        outcomes = evaluate_t2a(
            _subset(text_set, qids, context), audio, pairing, cfg.threads
        )
        _dump_outcomes(
            rank_rows, outcomes, pairing, ds.name, model.name, direction, query_type
        )
        scored = (
            _collapse_per_clip(outcomes, clip_of)
            if cfg.recall_mode == "per_clip_max"
            else outcomes
        )
        for k in cfg.ks:
            report.add(
                MetricKey(ds.name, model.name, query_type, direction, METRIC_RECALL, k),
                recall_at_k(scored, k),
                len(scored),
            )
        return

    if direction == "T2A":
        entries = manifest.uiq_of_type(query_type)
        if not entries:
            # Nothing of this type in the manifest: the cell is skipped,
            # not scored as zero.
            return
        pairing = {}
        qids = []
        for entry in entries:
            qid = f"{entry.clip_id}#{query_type}"
            hn_id = (
                manifest.hn_by_target[entry.clip_id]
                if query_type == "negative"
                else None
            )
            qids.append(qid)
            pairing[qid] = (entry.clip_id, hn_id)
        outcomes = evaluate_t2a(
            _subset(text_set, qids, context), audio, pairing, cfg.threads
        )
        _dump_outcomes(
            rank_rows, outcomes, pairing, ds.name, model.name, direction, query_type
        )
        n = len(outcomes)

        def put(metric: str, value: float, k: Optional[int] = None) -> None:
            report.add(
                MetricKey(ds.name, model.name, query_type, direction, metric, k),
                value,
                n,
            )

        for k in cfg.ks:
            put(METRIC_RECALL, recall_at_k(outcomes, k), k)
        if query_type == "negative":
            for k in cfg.ks:
                put(METRIC_HNSR, hnsr_at_k(outcomes, k), k)
                put(METRIC_TFR_HN, tfr_hn_at_k(outcomes, k), k)
            put(METRIC_HNSR, hnsr(outcomes))
            put(METRIC_TFR, tfr(outcomes))
            put(METRIC_DELTA_RANK, delta_rank(outcomes))
        return

    # T2T: docs are one designated caption per clip (or an external
    # generated corpus keyed by clip id); queries are the remaining
    # captions; the only relevant doc is the query's own clip.
    doc_idx = cfg.t2t_doc_index
    for clip in manifest.clips:
        if doc_idx >= len(clip.captions):
            raise HarnessError(
                f"{context}: t2t_doc_index {doc_idx} out of range for clip "
                f"{clip.clip_id!r} with {len(clip.captions)} captions"
            )
    clip_ids = [clip.clip_id for clip in manifest.clips]
    if model.t2t_docs_path is not None:
        docs_set = loader.get(model.t2t_docs_path)
        docs = _subset(docs_set, clip_ids, f"{context} docs")
    else:
        doc_qids = [f"{c}#{doc_idx}" for c in clip_ids]
        rows = _subset(text_set, doc_qids, f"{context} docs")
        docs = EmbeddingSet(tuple(clip_ids), rows.data, normalized=True)

    qids = []
    clip_of = {}
    for clip in manifest.clips:
        for idx in range(len(clip.captions)):
            if idx == doc_idx:
                continue
            qid = f"{clip.clip_id}#{idx}"
            qids.append(qid)
            clip_of[qid] = clip.clip_id
    if not qids:
        raise HarnessError(
            f"{context}: no queries remain once the document caption is "
            f"removed (clips need at least 2 captions)"
        )
    pairing = {qid: (clip_of[qid], None) for qid in qids}
    sim = cosine_matrix(_subset(text_set, qids, context), docs, threads=cfg.threads)
    outcomes = rank_outcomes(sim, pairing)
    _dump_outcomes(
        rank_rows, outcomes, pairing, ds.name, model.name, direction, query_type
    )
    scored = (
        _collapse_per_clip(outcomes, clip_of)
        if cfg.recall_mode == "per_clip_max"
        else outcomes
    )
    for k in cfg.ks:
        report.add(
            MetricKey(ds.name, model.name, query_type, direction, METRIC_RECALL, k),
            recall_at_k(scored, k),
            len(scored),
        )


def _write_outputs(
    cfg: RunConfig,
    merged: MetricReport,
    rank_rows: list[dict],
    digests: dict[str, str],
) -> None:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)

    report_mod.write_report_file(merged, out / "report.jsonl")
    report_mod.write_jsonl(rank_rows, out / "ranks.jsonl")
    report_mod.write_provenance(
        out / "provenance.json", cfg.config_path, digests, cfg.seed
    )
    report_mod.render_report(
        merged, out, formats=cfg.formats, figures=cfg.figures
    )
