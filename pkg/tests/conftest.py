"""Shared fixture builders for the test suite."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from atrbench.embedstore import EmbeddingSet, l2_normalize


def unit_set(ids, rng: np.random.Generator, dim: int) -> EmbeddingSet:
    """Random unit-norm embedding set over the given ids."""
    data = rng.standard_normal((len(ids), dim)).astype(np.float32)
    return l2_normalize(EmbeddingSet(tuple(ids), data))


def manifest_lines(clips, uiq=(), hn=()):
    """Manifest records from terse tuples.

    clips: (clip_id, [captions]); uiq: (clip_id, type, text);
    hn: (target, hard_negative).
    """
    lines = []
    for clip_id, captions in clips:
        lines.append(
            {"record": "clip", "clip_id": clip_id, "captions": list(captions)}
        )
    for clip_id, query_type, text in uiq:
        lines.append(
            {
                "record": "uiq",
                "clip_id": clip_id,
                "query_type": query_type,
                "query_text": text,
            }
        )
    for target, negative in hn:
        lines.append(
            {
                "record": "hn_pair",
                "target_clip_id": target,
                "hard_negative_clip_id": negative,
            }
        )
    return lines


def write_manifest(path: Path, clips, uiq=(), hn=()) -> Path:
    rows = manifest_lines(clips, uiq, hn)
    path.write_text(
        "".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8"
    )
    return path


def save_rows(path: Path, ids, rows) -> Path:
    from atrbench.embedstore import save_embeddings

    data = np.asarray(rows, dtype=np.float32)
    save_embeddings(EmbeddingSet(tuple(ids), data), path)
    return path


TOY_CONFIG = """\
[run]
output_dir = "{out_dir}"
ks = [1, 2, 3]
{extra}

[[dataset]]
name = "toy"
manifest = "manifest.jsonl"
audio = "audio.oemb"

[[dataset.model]]
name = "alpha"

[dataset.model.text.t2a]
caption = "text_alpha.oemb"
question = "text_alpha.oemb"
negative = "text_alpha.oemb"

[dataset.model.text.t2t]
caption = "text_alpha.oemb"

[[dataset.model]]
name = "beta"

[dataset.model.text.t2a]
caption = "text_beta.oemb"
question = "text_beta.oemb"
negative = "text_beta.oemb"

[dataset.model.text.t2t]
caption = "text_beta.oemb"
"""


def build_toy_run(root: Path, out_dir: str = "out", extra_run: str = "") -> Path:
    """Three-clip dataset with hand-placed embeddings.

    Model "alpha" sees every query exactly on its target audio except
    the two negative queries, whose ranks are engineered:
      a#negative: target rank 1, hard negative rank 3
      b#negative: target rank 2, hard negative rank 1
    Model "beta" maps every text row onto the NEXT clip's audio, so its
    targets never rank first. Returns the config path.
    """
    dim = 8

    def e(i, scale=1.0, j=None, scale_j=0.0):
        row = np.zeros(dim, dtype=np.float32)
        row[i] = scale
        if j is not None:
            row[j] = scale_j
        return row

    clips = ["a", "b", "c"]
    write_manifest(
        root / "manifest.jsonl",
        clips=[(c, [f"{c} cap0", f"{c} cap1"]) for c in clips],
        uiq=[(c, "question", f"Can you hear {c}?") for c in clips]
        + [
            ("a", "negative", "a sound without b"),
            ("b", "negative", "b sound without c"),
        ],
        hn=[("a", "b"), ("b", "c")],
    )
    save_rows(root / "audio.oemb", clips, [e(0), e(1), e(2)])

    text_ids = [
        "a#0", "a#1", "b#0", "b#1", "c#0", "c#1",
        "a#question", "b#question", "c#question",
        "a#negative", "b#negative",
    ]
    own = {"a": 0, "b": 1, "c": 2}
    alpha_rows = [e(own[i[0]]) for i in text_ids[:9]]
    alpha_rows.append(e(0, 0.8, 2, 0.6))  # a#negative: a=0.8, c=0.6, b=0
    alpha_rows.append(e(1, 0.6, 2, 0.8))  # b#negative: b=0.6, c=0.8, a=0
    save_rows(root / "text_alpha.oemb", text_ids, alpha_rows)

    nxt = {"a": 1, "b": 2, "c": 0}
    beta_rows = [e(nxt[i[0]]) for i in text_ids]
    save_rows(root / "text_beta.oemb", text_ids, beta_rows)

    config = root / "run.toml"
    config.write_text(
        TOY_CONFIG.format(out_dir=out_dir, extra=extra_run), encoding="utf-8"
    )
    return config
