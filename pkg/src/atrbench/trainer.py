"""Projection-head contrastive trainer over frozen backbone embeddings.

Each modality gets a head: bias-free linear map to the shared width,
inverted dropout (training only), per-row layer norm, then L2
normalization. The objective is the symmetric InfoNCE loss over the
in-batch similarity matrix at temperature 0.07, optimized with AdamW.

Everything runs in 64-bit internally so finite-difference gradient
verification is meaningful; exported embeddings and checkpoints are
32-bit. Dropout masks come from a counter-based RNG keyed by
(seed, step, row), making runs reproducible for any worker count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import embedstore
from .embedstore import EmbeddingSet
from .errors import BenchError
from .simrank import rank_of

DEFAULT_OUT_DIM = 512
DEFAULT_TEMPERATURE = 0.07
LAYER_NORM_EPS = 1e-5
DEGENERATE_NORM_TOL = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Philox stream ids so the two heads never share dropout masks.
TEXT_STREAM = 0
AUDIO_STREAM = 1


class TrainerError(BenchError):
    """Bad trainer inputs or non-finite state."""


class DegenerateNormError(TrainerError):
    """A forward row collapsed to (near-)zero norm before L2."""


class DivergenceError(TrainerError):
    """Loss or parameters went non-finite during training."""


@dataclass
class ProjectionHead:
    """Trainable parameters of one modality head (64-bit)."""

    w: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    dropout_rate: float = 0.1

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=np.float64)
        self.ln_gamma = np.asarray(self.ln_gamma, dtype=np.float64)
        self.ln_beta = np.asarray(self.ln_beta, dtype=np.float64)
        if self.w.ndim != 2:
            raise TrainerError("w must be 2-D (in_dim x out_dim)")
        out_dim = self.w.shape[1]
        if self.ln_gamma.shape != (out_dim,) or self.ln_beta.shape != (out_dim,):
            raise TrainerError("layer-norm parameter shape mismatch")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise TrainerError("dropout_rate must be in [0, 1)")
        for name, arr in (
            ("w", self.w),
            ("ln_gamma", self.ln_gamma),
            ("ln_beta", self.ln_beta),
        ):
            if not np.isfinite(arr).all():
                raise TrainerError(f"non-finite values in {name}")

    @property
    def in_dim(self) -> int:
        return int(self.w.shape[0])

    @property
    def out_dim(self) -> int:
        return int(self.w.shape[1])

    @classmethod
    def create(
        cls,
        in_dim: int,
        out_dim: int = DEFAULT_OUT_DIM,
        dropout_rate: float = 0.1,
        seed: int = 0,
    ) -> "ProjectionHead":
        """Scaled-normal init for W; identity layer norm."""
        rng = np.random.default_rng(np.random.SeedSequence([seed]))
        w = rng.standard_normal((in_dim, out_dim)) / math.sqrt(in_dim)
        return cls(w, np.ones(out_dim), np.zeros(out_dim), dropout_rate)

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(
            self.w.copy(),
            self.ln_gamma.copy(),
            self.ln_beta.copy(),
            self.dropout_rate,
        )


def _dropout_mask(
    shape: tuple[int, int], rate: float, seed: int, step: int, stream: int
) -> np.ndarray:
    """Inverted-dropout mask; row r draws from Philox counter
    (0, 0, step, r) under key (seed, stream)."""
    n_rows, dim = shape
    mask = np.empty((n_rows, dim), dtype=np.float64)
    scale = 1.0 / (1.0 - rate)
    for row in range(n_rows):
        bits = np.random.Philox(key=[seed, stream], counter=[0, 0, step, row])
        u = np.random.Generator(bits).random(dim)
        mask[row] = np.where(u < rate, 0.0, scale)
    return mask


def _forward(
    head: ProjectionHead,
    batch: np.ndarray,
    train_mode: bool,
    rng_seed: int,
    step: int,
    stream: int,
) -> tuple[np.ndarray, dict]:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != head.in_dim:
        raise TrainerError(
            f"batch width {x.shape[-1] if x.ndim else '?'} does not match "
            f"head in_dim {head.in_dim}"
        )
    z = x @ head.w
    if train_mode and head.dropout_rate > 0.0:
        mask = _dropout_mask(z.shape, head.dropout_rate, rng_seed, step, stream)
        z = z * mask
    else:
        mask = None

    mu = z.mean(axis=1, keepdims=True)
    centered = z - mu
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    h = head.ln_gamma * xhat + head.ln_beta

    norms = np.linalg.norm(h, axis=1, keepdims=True)
    if norms.size and norms.min() < DEGENERATE_NORM_TOL:
        row = int(np.argmin(norms[:, 0]))
        raise DegenerateNormError(
            f"row {row} collapsed to norm {norms[row, 0]:.3e} before L2 "
            f"normalization"
        )
    y = h / norms
    if not np.isfinite(y).all():
        raise TrainerError("non-finite forward output")
    cache = {
        "x": x,
        "mask": mask,
        "inv_std": inv_std,
        "xhat": xhat,
        "norms": norms,
        "y": y,
    }
    return y, cache


def forward(
    head: ProjectionHead,
    batch: np.ndarray,
    train_mode: bool = False,
    rng_seed: int = 0,
    step: int = 0,
    stream: int = 0,
) -> np.ndarray:
    """Project a batch to unit-norm rows; deterministic given the seed."""
    y, _ = _forward(head, batch, train_mode, rng_seed, step, stream)
    return y


def _backward(
    head: ProjectionHead, cache: dict, d_y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dW, dgamma, dbeta) given dLoss/dOutput."""
    y = cache["y"]
    norms = cache["norms"]
    # L2 normalization: y = h / ||h||.
    d_h = (d_y - y * np.sum(d_y * y, axis=1, keepdims=True)) / norms

    xhat = cache["xhat"]
    d_gamma = np.sum(d_h * xhat, axis=0)
    d_beta = np.sum(d_h, axis=0)
    d_xhat = d_h * head.ln_gamma

    # Layer norm with population variance over the row.
    inv_std = cache["inv_std"]
    mean_dx = np.mean(d_xhat, axis=1, keepdims=True)
    mean_dx_xhat = np.mean(d_xhat * xhat, axis=1, keepdims=True)
    d_z = inv_std * (d_xhat - mean_dx - xhat * mean_dx_xhat)

    if cache["mask"] is not None:
        d_z = d_z * cache["mask"]
    d_w = cache["x"].T @ d_z
    return d_w, d_gamma, d_beta


def infonce_loss(sim: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Symmetric InfoNCE over a square in-batch similarity matrix.

    Mean over rows of the text-to-audio cross-entropy plus mean over
    columns of the audio-to-text cross-entropy, halved. Computed with
    max-subtracted log-sum-exp for stability.
    """
    s = _checked_sim(sim, temperature) / temperature
    n = s.shape[0]
    diag = np.diagonal(s)
    loss_t2a = np.mean(_logsumexp_rows(s) - diag)
    loss_a2t = np.mean(_logsumexp_rows(s.T) - diag)
    return float(0.5 * (loss_t2a + loss_a2t))


def infonce_grad(sim: np.ndarray, temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    """Exact gradient of infonce_loss with respect to each sim entry:
    (row_softmax + col_softmax - 2I) / (2 N temperature)."""
    s = _checked_sim(sim, temperature) / temperature
    n = s.shape[0]
    p = _softmax_rows(s)
    q = _softmax_rows(s.T).T
    eye = np.eye(n)
    return (p + q - 2.0 * eye) / (2.0 * n * temperature)


def _checked_sim(sim: np.ndarray, temperature: float) -> np.ndarray:
    s = np.asarray(sim, dtype=np.float64)
    if temperature <= 0:
        raise TrainerError("temperature must be positive")
    if s.ndim != 2 or s.shape[0] != s.shape[1] or s.shape[0] < 1:
        raise TrainerError(f"similarity matrix must be square, got {s.shape}")
    if not np.isfinite(s).all():
        raise TrainerError("non-finite similarity entries")
    return s


def _logsumexp_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    return (m + np.log(np.sum(np.exp(s - m), axis=1, keepdims=True)))[:, 0]


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = DEFAULT_TEMPERATURE
    learning_rate: float = 3e-4
    batch_size: int = 64
    max_steps: int = 500
    seed: int = 0
    weight_decay: float = 0.0
    early_stop_k: int = 10
    # Epochs without validation recall improvement before stopping;
    # 0 disables early stopping (validation is still traced).
    early_stop_patience: int = 0

    def __post_init__(self) -> None:
        if self.temperature <= 0:
            raise TrainerError("temperature must be positive")
        if self.batch_size < 1:
            raise TrainerError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise TrainerError("learning_rate and weight_decay must be >= 0")
        if self.max_steps < 0:
            raise TrainerError("max_steps must be >= 0")
        if self.early_stop_k < 1 or self.early_stop_patience < 0:
            raise TrainerError("bad early-stop configuration")


@dataclass
class HeadPair:
    text: ProjectionHead
    audio: ProjectionHead


@dataclass
class TrainResult:
    heads: HeadPair
    loss_trace: list[tuple[int, float]]
    val_trace: list[tuple[int, float]]
    steps_run: int
    stopped_early: bool


class _AdamW:
    """Decoupled-weight-decay Adam over a list of parameter arrays."""

    def __init__(self, params: Sequence[np.ndarray], lr: float, weight_decay: float):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        b1c = 1.0 - ADAM_BETA1**self.t
        b2c = 1.0 - ADAM_BETA2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + ADAM_EPS)
            p -= self.lr * update
            if self.weight_decay:
                p -= self.lr * self.weight_decay * p


def _resolve_rows(emb: EmbeddingSet, ids: Sequence[str], side: str) -> np.ndarray:
    try:
        return emb.data[emb.row_indices(ids)].astype(np.float64)
    except BenchError as exc:
        raise TrainerError(f"{side} pair id problem: {exc}") from exc


def _val_recall(
    text_head: ProjectionHead,
    audio_head: ProjectionHead,
    text_rows: np.ndarray,
    audio_rows: np.ndarray,
    k: int,
) -> float:
    y_t = forward(text_head, text_rows)
    y_a = forward(audio_head, audio_rows)
    sim = y_t @ y_a.T
    hits = sum(
        1 for i in range(sim.shape[0]) if rank_of(sim[i], i) <= k
    )
    return 100.0 * hits / sim.shape[0]


def train(
    heads: HeadPair,
    text_emb: EmbeddingSet,
    audio_emb: EmbeddingSet,
    pairs: Sequence[tuple[str, str]],
    cfg: TrainConfig,
    val_pairs: Optional[Sequence[tuple[str, str]]] = None,
) -> TrainResult:
    """Optimize both heads with symmetric InfoNCE over paired rows.

    ``pairs`` is (text_id, audio_id) per positive; all other in-batch
    combinations act as negatives. The input heads are not mutated.
    Epoch shuffles derive from (seed, epoch); dropout masks from
    (seed, step, row), so two runs with one seed match bit-exactly.
    """
    if not pairs:
        raise TrainerError("no training pairs")
    text_head = heads.text.copy()
    audio_head = heads.audio.copy()

    x_text = _resolve_rows(text_emb, [p[0] for p in pairs], "text")
    x_audio = _resolve_rows(audio_emb, [p[1] for p in pairs], "audio")
    if val_pairs is not None:
        if not val_pairs:
            raise TrainerError("validation pair list is empty")
        v_text = _resolve_rows(text_emb, [p[0] for p in val_pairs], "text")
        v_audio = _resolve_rows(audio_emb, [p[1] for p in val_pairs], "audio")

    opt_text = _AdamW(
        [text_head.w, text_head.ln_gamma, text_head.ln_beta],
        cfg.learning_rate,
        cfg.weight_decay,
    )
    opt_audio = _AdamW(
        [audio_head.w, audio_head.ln_gamma, audio_head.ln_beta],
        cfg.learning_rate,
        cfg.weight_decay,
    )

    n = len(pairs)
    loss_trace: list[tuple[int, float]] = []
    val_trace: list[tuple[int, float]] = []
    step = 0
    epoch = 0
    best_val = -math.inf
    bad_epochs = 0
    stopped_early = False

    while step < cfg.max_steps and not stopped_early:
        shuffle = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, epoch])
        ).permutation(n)
        for start in range(0, n, cfg.batch_size):
            if step >= cfg.max_steps:
                break
            rows = shuffle[start : start + cfg.batch_size]
            y_t, cache_t = _forward(
                text_head, x_text[rows], True, cfg.seed, step, TEXT_STREAM
            )
            y_a, cache_a = _forward(
                audio_head, x_audio[rows], True, cfg.seed, step, AUDIO_STREAM
            )
            sim = y_t @ y_a.T
            loss = infonce_loss(sim, cfg.temperature)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            loss_trace.append((step, loss))

            g_sim = infonce_grad(sim, cfg.temperature)
            grads_t = _backward(text_head, cache_t, g_sim @ y_a)
            grads_a = _backward(audio_head, cache_a, g_sim.T @ y_t)
            opt_text.step(grads_t)
            opt_audio.step(grads_a)
            step += 1

        epoch += 1
        if val_pairs is not None:
            recall = _val_recall(
                text_head, audio_head, v_text, v_audio, cfg.early_stop_k
            )
            val_trace.append((epoch, recall))
            if cfg.early_stop_patience > 0:
                if recall > best_val:
                    best_val = recall
                    bad_epochs = 0
                else:
                    bad_epochs += 1
                    if bad_epochs >= cfg.early_stop_patience:
                        stopped_early = True

    return TrainResult(
        HeadPair(text_head, audio_head),
        loss_trace,
        val_trace,
        step,
        stopped_early,
    )


def encode(head: ProjectionHead, emb: EmbeddingSet) -> EmbeddingSet:
    """Project a whole embedding set in eval mode; 32-bit export."""
    y = forward(head, emb.data.astype(np.float64))
    return EmbeddingSet(emb.ids, y.astype(np.float32), normalized=True)


def save_checkpoint(head: ProjectionHead, path: str | Path) -> None:
    """W goes into the standard embedding container (32-bit); layer-norm
    parameters and config ride in a JSON sidecar at full precision."""
    path = Path(path)
    rows = EmbeddingSet(
        tuple(f"w{i:05d}" for i in range(head.in_dim)),
        head.w.astype(np.float32),
    )
    embedstore.save_embeddings(rows, path)
    meta = {
        "ln_gamma": [float(v) for v in head.ln_gamma],
        "ln_beta": [float(v) for v in head.ln_beta],
        "dropout_rate": head.dropout_rate,
        "in_dim": head.in_dim,
        "out_dim": head.out_dim,
    }
    Path(str(path) + ".meta.json").write_text(
        json.dumps(meta, indent=2) + "\n", encoding="utf-8"
    )


def load_checkpoint(path: str | Path) -> ProjectionHead:
    path = Path(path)
    rows = embedstore.load_embeddings(path)
    meta = json.loads(Path(str(path) + ".meta.json").read_text(encoding="utf-8"))
    head = ProjectionHead(
        rows.data.astype(np.float64),
        np.array(meta["ln_gamma"], dtype=np.float64),
        np.array(meta["ln_beta"], dtype=np.float64),
        float(meta["dropout_rate"]),
    )
    if head.in_dim != int(meta["in_dim"]) or head.out_dim != int(meta["out_dim"]):
        raise TrainerError(f"{path}: checkpoint shape disagrees with metadata")
    return head


def load_pairs(path: str | Path) -> list[tuple[str, str]]:
    """(text_id, audio_id) positives from a line-delimited file."""
    pairs: list[tuple[str, str]] = []
    with Path(path).open(encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pairs.append((str(obj["text_id"]), str(obj["audio_id"])))
            except (json.JSONDecodeError, KeyError) as exc:
                raise TrainerError(
                    f"{path}:{line_no}: bad pair record: {exc}"
                ) from exc
    return pairs


def write_trace(result: TrainResult, path: str | Path) -> None:
    """Loss-per-step and validation-recall-per-epoch records."""
    with Path(path).open("w", encoding="utf-8") as handle:
        for step, loss in result.loss_trace:
            handle.write(json.dumps({"kind": "loss", "step": step, "loss": loss}) + "\n")
        for epoch, recall in result.val_trace:
            handle.write(
                json.dumps({"kind": "val", "epoch": epoch, "recall": recall}) + "\n"
            )
