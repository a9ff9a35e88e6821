"""Embedding containers, binary persistence, and dataset manifests.

This module owns every on-disk format the engine consumes:

- the binary embedding container (magic ``OEMB``, described in
  docs/FORMATS.md) plus its order-aligned ``.ids`` sidecar,
- the line-delimited dataset manifest (clips, user-intent queries,
  hard-negative pairs).

Embeddings are stored as 32-bit little-endian reals, row-major. Loaded
sets and manifests are immutable after construction and safe to share
across worker threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BenchError, FormatError, ManifestError

MAGIC = b"OEMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version u32, row count u64, dim u32
HEADER_SIZE = _HEADER.size

# |norm - 1| allowed when the normalized flag is set.
UNIT_NORM_TOL = 1e-4
# Rows with Euclidean norm below this cannot be meaningfully normalized.
DEGENERATE_NORM_TOL = 1e-12

# Canonical query-type tokens. The generation-prompt alias "tagging" is
# accepted on input and canonicalized to "keyphrase".
QUERY_TYPES = ("question", "imperative", "keyphrase", "paraphrase", "negative")
_QUERY_TYPE_ALIASES = {"tagging": "keyphrase"}


class EmbeddingError(BenchError):
    """An EmbeddingSet invariant is violated."""


class DegenerateVectorError(EmbeddingError):
    """A row has (near-)zero norm and cannot be normalized."""


class UnknownQueryTypeError(BenchError):
    """A query-type token is not one of the canonical five."""


def canonical_query_type(token: str) -> str:
    """Map a query-type token to its canonical lowercase form."""
    if token in QUERY_TYPES:
        return token
    if token in _QUERY_TYPE_ALIASES:
        return _QUERY_TYPE_ALIASES[token]
    raise UnknownQueryTypeError(
        f"unknown query type {token!r}; expected one of {', '.join(QUERY_TYPES)}"
    )


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """An ordered, id-addressed matrix of 32-bit embeddings.

    ``normalized`` is a promise that every row is unit-norm; it is
    checked at construction time, not merely recorded.
    """

    ids: tuple[str, ...]
    data: np.ndarray
    normalized: bool = False
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ids = tuple(self.ids)
        object.__setattr__(self, "ids", ids)

        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise EmbeddingError(f"data must be 2-D, got {data.ndim}-D")
        if data.shape[1] < 1:
            raise EmbeddingError("embedding dim must be positive")
        if len(ids) != data.shape[0]:
            raise EmbeddingError(
                f"{len(ids)} ids for {data.shape[0]} rows"
            )

        index: dict[str, int] = {}
        for pos, item in enumerate(ids):
            if not isinstance(item, str) or not item:
                raise EmbeddingError(f"empty or non-string id at row {pos}")
            if "\n" in item or "\r" in item:
                # The sidecar format is one id per line.
                raise EmbeddingError(f"id at row {pos} contains a line break")
            if item in index:
                raise EmbeddingError(f"duplicate id {item!r}")
            index[item] = pos

        bad = ~np.isfinite(data)
        if bad.any():
            row = int(np.nonzero(bad.any(axis=1))[0][0])
            raise EmbeddingError(f"non-finite value in row {ids[row]!r}")

        if self.normalized and data.shape[0]:
            norms = np.linalg.norm(data.astype(np.float64), axis=1)
            off = np.abs(norms - 1.0)
            if off.max() > UNIT_NORM_TOL:
                row = int(np.argmax(off))
                raise EmbeddingError(
                    f"normalized flag set but row {ids[row]!r} has norm "
                    f"{norms[row]:.6f}"
                )

        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "_index", index)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __len__(self) -> int:
        return int(self.data.shape[0])

    def __contains__(self, item: str) -> bool:
        return item in self._index

    def index_of(self, item: str) -> int:
        try:
            return self._index[item]
        except KeyError:
            raise EmbeddingError(f"unknown embedding id {item!r}") from None

    def row(self, item: str) -> np.ndarray:
        return self.data[self.index_of(item)]

    def row_indices(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.index_of(i) for i in ids], dtype=np.intp)

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        """Rows for ``ids``, in the given order, flag preserved."""
        rows = self.row_indices(ids)
        return EmbeddingSet(tuple(ids), self.data[rows], self.normalized)


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    """Scale every row to unit Euclidean norm.

    Near-zero rows are hard errors: cosine similarity against them is
    undefined and silently skipping would corrupt rank arithmetic.
    """
    if len(emb) == 0:
        return EmbeddingSet(emb.ids, emb.data, normalized=True)
    norms = np.linalg.norm(emb.data.astype(np.float64), axis=1)
    if norms.min() < DEGENERATE_NORM_TOL:
        row = int(np.argmin(norms))
        raise DegenerateVectorError(
            f"row {emb.ids[row]!r} has near-zero norm {norms[row]:.3e}"
        )
    scaled = (emb.data.astype(np.float64) / norms[:, None]).astype(np.float32)
    return EmbeddingSet(emb.ids, scaled, normalized=True)


def save_embeddings(emb: EmbeddingSet, path: str | Path) -> None:
    """Write the binary container and its ``.ids`` sidecar."""
    path = Path(path)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(emb), emb.dim)
    payload = np.ascontiguousarray(emb.data, dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    sidecar = Path(str(path) + ".ids")
    sidecar.write_text("".join(f"{i}\n" for i in emb.ids), encoding="utf-8")


def load_embeddings(path: str | Path) -> EmbeddingSet:
    """Read a container written by save_embeddings.

    Returns a set with ``normalized=False``; callers that need unit rows
    go through l2_normalize. Errors name the failing byte offset or id.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"{path}: truncated header, {len(blob)} bytes < {HEADER_SIZE}"
        )
    magic, version, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format version {version} at offset 4"
        )
    if dim < 1:
        raise FormatError(f"{path}: dim must be positive, got {dim}")
    expected = count * dim * 4
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"{path}: payload at offset {HEADER_SIZE} holds {actual} bytes, "
            f"header declares {count}x{dim} ({expected} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE)
    data = data.reshape(count, dim).astype(np.float32)

    sidecar = Path(str(path) + ".ids")
    ids = sidecar.read_text(encoding="utf-8").splitlines()
    if len(ids) != count:
        raise FormatError(
            f"{sidecar}: {len(ids)} ids for {count} rows"
        )
    try:
        return EmbeddingSet(tuple(ids), data, normalized=False)
    except EmbeddingError as exc:
        raise FormatError(f"{path}: {exc}") from exc


@dataclass(frozen=True)
class Clip:
    clip_id: str
    captions: tuple[str, ...]


@dataclass(frozen=True)
class UiqEntry:
    clip_id: str
    query_type: str
    query_text: str


@dataclass(frozen=True)
class HnPair:
    target_clip_id: str
    hard_negative_clip_id: str


@dataclass(frozen=True, eq=False)
class DatasetManifest:
    """Clips, user-intent queries, and hard-negative pairs for one dataset.

    Referential integrity is total: construction rejects any dangling
    clip reference, duplicate clip id, duplicate (clip, query type)
    entry, duplicate hard-negative target, or negative-type query whose
    clip lacks a mined pair. Nothing is silently dropped.
    """

    clips: tuple[Clip, ...]
    uiq_entries: tuple[UiqEntry, ...]
    hn_pairs: tuple[HnPair, ...]
    clip_index: dict[str, Clip] = field(init=False, repr=False)
    hn_by_target: dict[str, str] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        clip_index: dict[str, Clip] = {}
        for clip in self.clips:
            if clip.clip_id in clip_index:
                raise ManifestError(f"duplicate clip_id {clip.clip_id!r}")
            clip_index[clip.clip_id] = clip

        seen_uiq: set[tuple[str, str]] = set()
        for entry in self.uiq_entries:
            if entry.clip_id not in clip_index:
                raise ManifestError(
                    f"uiq entry references unknown clip {entry.clip_id!r}"
                )
            key = (entry.clip_id, entry.query_type)
            if key in seen_uiq:
                raise ManifestError(
                    f"duplicate uiq entry for clip {entry.clip_id!r} "
                    f"type {entry.query_type!r}"
                )
            seen_uiq.add(key)

        hn_by_target: dict[str, str] = {}
        for pair in self.hn_pairs:
            for ref in (pair.target_clip_id, pair.hard_negative_clip_id):
                if ref not in clip_index:
                    raise ManifestError(
                        f"hn_pair references unknown clip {ref!r}"
                    )
            if pair.target_clip_id == pair.hard_negative_clip_id:
                raise ManifestError(
                    f"hn_pair target equals hard negative: "
                    f"{pair.target_clip_id!r}"
                )
            if pair.target_clip_id in hn_by_target:
                raise ManifestError(
                    f"clip {pair.target_clip_id!r} is the target of more "
                    f"than one hn_pair"
                )
            hn_by_target[pair.target_clip_id] = pair.hard_negative_clip_id

        for entry in self.uiq_entries:
            if entry.query_type == "negative" and entry.clip_id not in hn_by_target:
                raise ManifestError(
                    f"negative query for clip {entry.clip_id!r} has no "
                    f"grounding hn_pair"
                )

        object.__setattr__(self, "clip_index", clip_index)
        object.__setattr__(self, "hn_by_target", hn_by_target)

    @property
    def clip_ids(self) -> tuple[str, ...]:
        return tuple(c.clip_id for c in self.clips)

    def uiq_of_type(self, query_type: str) -> tuple[UiqEntry, ...]:
        query_type = canonical_query_type(query_type)
        return tuple(e for e in self.uiq_entries if e.query_type == query_type)


def _manifest_str(obj: dict, key: str, line: int) -> str:
    value = obj.get(key)
    if not isinstance(value, str) or not value:
        raise ManifestError(f"line {line}: {key!r} must be a non-empty string")
    return value


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a line-delimited manifest (see docs/FORMATS.md for keys)."""
    path = Path(path)
    clips: list[Clip] = []
    uiq_entries: list[UiqEntry] = []
    hn_pairs: list[HnPair] = []
    with path.open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{line_no}: bad JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{line_no}: record must be an object")
            kind = obj.get("record")
            try:
                if kind == "clip":
                    captions = obj.get("captions")
                    if not isinstance(captions, list) or not all(
                        isinstance(c, str) for c in captions
                    ):
                        raise ManifestError(
                            f"line {line_no}: 'captions' must be a list of strings"
                        )
                    clips.append(
                        Clip(_manifest_str(obj, "clip_id", line_no), tuple(captions))
                    )
                elif kind == "uiq":
                    uiq_entries.append(
                        UiqEntry(
                            _manifest_str(obj, "clip_id", line_no),
                            canonical_query_type(
                                _manifest_str(obj, "query_type", line_no)
                            ),
                            _manifest_str(obj, "query_text", line_no),
                        )
                    )
                elif kind == "hn_pair":
                    hn_pairs.append(
                        HnPair(
                            _manifest_str(obj, "target_clip_id", line_no),
                            _manifest_str(obj, "hard_negative_clip_id", line_no),
                        )
                    )
                else:
                    raise ManifestError(
                        f"line {line_no}: unknown record type {kind!r}"
                    )
            except UnknownQueryTypeError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from exc
    return DatasetManifest(tuple(clips), tuple(uiq_entries), tuple(hn_pairs))
