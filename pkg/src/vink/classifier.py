"""Compact two-layer MLP head: relu + dropout hidden layer, scalar logit out.

Training uses Adam on a numerically stable binary cross-entropy, splits
validation data by slide (never by patch), and keeps the weights from the
epoch with the highest validation accuracy. Everything is seeded and
bit-reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    EmptyTrainingSet,
    NonFiniteInput,
    SingleClassData,
    TruncatedFile,
    VersionMismatch,
)
from .features import FeatureRecord

MODEL_MAGIC = b"VINM"
MODEL_VERSION = 1


@dataclass
class MlpModel:
    """Weights of the two-layer perceptron; hidden width defaults to the
    input width. Arrays are float64 in memory, float32 on disk."""

    w1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float
    metadata: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "MlpModel":
        return MlpModel(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2), dict(self.metadata)
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    max_epochs: int = 1000
    dropout_p: float = 0.2
    batch_size: int = 256
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1
    hidden_dim: int | None = None  # None: match the input width

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise EmptyTrainingSet("no training epochs requested (max_epochs < 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "max_epochs": self.max_epochs,
            "dropout_p": self.dropout_p,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "val_fraction": self.val_fraction,
            "hidden_dim": self.hidden_dim,
        }


@dataclass
class TrainReport:
    train_losses: list[float]
    val_accuracies: list[float]
    best_epoch: int  # 1-based
    best_val_accuracy: float
    val_slides: list[str] = field(default_factory=list)


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def stable_ce(y, z):
    """Binary cross-entropy from the logit: max(z,0) - z*y + log(1 + e^-|z|).

    Analytically equal to -[y log P + (1-y) log(1-P)] with P = sigmoid(z),
    but finite for |z| up to 1e4 and beyond. Gradient wrt z is sigmoid(z) - y.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    z_arr = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z_arr)):
        raise NonFiniteInput("logit is not finite")
    if not np.all((y_arr == 0.0) | (y_arr == 1.0)):
        raise ValueError("labels must be 0 or 1")
    out = np.maximum(z_arr, 0.0) - z_arr * y_arr + np.log1p(np.exp(-np.abs(z_arr)))
    return out if out.ndim else float(out)


def init_model(dim: int, hidden: int | None, seed_rng: np.random.Generator) -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    hidden = dim if hidden is None else hidden
    lim1 = 1.0 / np.sqrt(dim)
    lim2 = 1.0 / np.sqrt(hidden)
    return MlpModel(
        w1=seed_rng.uniform(-lim1, lim1, size=(hidden, dim)),
        b1=np.zeros(hidden),
        w2=seed_rng.uniform(-lim2, lim2, size=hidden),
        b2=0.0,
    )


def _forward_batch(model: MlpModel, x: np.ndarray, masks: np.ndarray | None, dropout_p: float):
    """Returns (logits, pre-activation, hidden-after-dropout)."""
    pre = x @ model.w1.T + model.b1
    hidden = np.maximum(pre, 0.0)
    if masks is not None:
        hidden = hidden * masks / (1.0 - dropout_p)
    z = hidden @ model.w2 + model.b2
    return z, pre, hidden


def forward(model: MlpModel, x: np.ndarray, dropout_mask: np.ndarray | None = None,
            dropout_p: float = 0.0) -> float:
    """Single-example logit; the mask (training only) uses inverted dropout
    scaling so inference needs no rescaling."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise DimensionMismatch(f"input has shape {x.shape}, model wants ({model.dim},)")
    if dropout_mask is not None and dropout_mask.shape != (model.hidden,):
        raise DimensionMismatch("dropout mask must match the hidden width")
    masks = None if dropout_mask is None else dropout_mask[None, :]
    z, _, _ = _forward_batch(model, x[None, :], masks, dropout_p)
    return float(z[0])


def backward(
    model: MlpModel,
    x: np.ndarray,
    y: np.ndarray,
    dropout_masks: np.ndarray | None = None,
    dropout_p: float = 0.0,
) -> Gradients:
    """Gradients of the mean stable cross-entropy over a batch."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionMismatch("batch must be a non-empty (n, dim) array")
    if x.shape[1] != model.dim:
        raise DimensionMismatch(f"batch width {x.shape[1]} != model dim {model.dim}")
    if dropout_masks is not None and dropout_masks.shape != (x.shape[0], model.hidden):
        raise DimensionMismatch("dropout masks must be (n, hidden)")
    n = x.shape[0]
    z, pre, hidden = _forward_batch(model, x, dropout_masks, dropout_p)
    dz = (sigmoid(z) - y) / n
    dw2 = hidden.T @ dz
    db2 = float(dz.sum())
    dh = np.outer(dz, model.w2)
    if dropout_masks is not None:
        dh = dh * dropout_masks / (1.0 - dropout_p)
    dh[pre <= 0.0] = 0.0
    dw1 = dh.T @ x
    db1 = dh.sum(axis=0)
    return Gradients(w1=dw1, b1=db1, w2=dw2, b2=db2)


@dataclass
class AdamState:
    t: int
    m: Gradients
    v: Gradients

    @classmethod
    def zeros(cls, model: MlpModel) -> "AdamState":
        zero = lambda a: np.zeros_like(a)
        return cls(
            t=0,
            m=Gradients(zero(model.w1), zero(model.b1), zero(model.w2), 0.0),
            v=Gradients(zero(model.w1), zero(model.b1), zero(model.w2), 0.0),
        )


def adam_step(model: MlpModel, state: AdamState, grads: Gradients, config: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    b1, b2, eps, lr = config.adam_beta1, config.adam_beta2, config.adam_eps, config.learning_rate
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t

    def update(param, m, v, g):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    update(model.w1, state.m.w1, state.v.w1, grads.w1)
    update(model.b1, state.m.b1, state.v.b1, grads.b1)
    update(model.w2, state.m.w2, state.v.w2, grads.w2)
    state.m.b2 = b1 * state.m.b2 + (1.0 - b1) * grads.b2
    state.v.b2 = b2 * state.v.b2 + (1.0 - b2) * grads.b2**2
    model.b2 -= lr * (state.m.b2 / c1) / (np.sqrt(state.v.b2 / c2) + eps)


def _records_matrix(records: Sequence[FeatureRecord]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([r.vector.astype(np.float64) for r in records])
    y = np.array([int(r.label) for r in records], dtype=np.float64)
    return x, y


def train(
    records_by_slide: Mapping[str, Sequence[FeatureRecord]], config: TrainConfig
) -> tuple[MlpModel, TrainReport]:
    """Train on pre-filtered binary records grouped per slide.

    Validation holds out whole slides (seeded shuffle, val_fraction of them,
    at least one when there are two or more); with a single slide it
    degenerates to validating on the training slide. Ties on the best
    validation accuracy keep the earliest epoch.
    """
    config.validate()
    slides = sorted(records_by_slide)
    for sid in slides:
        for rec in records_by_slide[sid]:
            if rec.label not in (0, 1):
                raise ValueError(
                    f"slide {sid}: record labeled {rec.label}; equivocal/unlabeled "
                    "records must be filtered out before training"
                )
    total = sum(len(records_by_slide[sid]) for sid in slides)
    if total == 0:
        raise EmptyTrainingSet("no training records")

    root = np.random.SeedSequence(config.seed)
    init_seq, split_seq, shuffle_seq, dropout_seq = root.spawn(4)
    split_rng = np.random.default_rng(split_seq)
    if len(slides) > 1:
        order = split_rng.permutation(len(slides))
        n_val = max(1, round(config.val_fraction * len(slides)))
        n_val = min(n_val, len(slides) - 1)
        val_slides = sorted(slides[i] for i in order[:n_val])
    else:
        val_slides = [slides[0]]
    train_slides = [s for s in slides if s not in val_slides] or val_slides

    train_records = [r for s in train_slides for r in records_by_slide[s]]
    val_records = [r for s in val_slides for r in records_by_slide[s]]
    if not train_records:
        raise EmptyTrainingSet("validation split left no training records")
    if not val_records:
        val_records = train_records
    x_train, y_train = _records_matrix(train_records)
    if len(np.unique(y_train)) < 2:
        raise SingleClassData("training records contain a single class")
    x_val, y_val = _records_matrix(val_records)

    model = init_model(x_train.shape[1], config.hidden_dim, np.random.default_rng(init_seq))
    state = AdamState.zeros(model)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    dropout_rng = np.random.default_rng(dropout_seq)

    n = len(train_records)
    losses: list[float] = []
    accuracies: list[float] = []
    best = model.copy()
    best_acc = -1.0
    best_epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            masks = None
            if config.dropout_p > 0.0:
                masks = dropout_rng.random((len(idx), model.hidden)) >= config.dropout_p
            z, pre, hidden = _forward_batch(model, xb, masks, config.dropout_p)
            loss_sum += float(stable_ce(yb, z).sum())
            dz = (sigmoid(z) - yb) / len(idx)
            dh = np.outer(dz, model.w2)
            if masks is not None:
                dh = dh * masks / (1.0 - config.dropout_p)
            dh[pre <= 0.0] = 0.0
            grads = Gradients(w1=dh.T @ xb, b1=dh.sum(axis=0), w2=hidden.T @ dz, b2=float(dz.sum()))
            adam_step(model, state, grads, config)
        losses.append(loss_sum / n)
        z_val, _, _ = _forward_batch(model, x_val, None, 0.0)
        acc = float(np.mean((z_val >= 0.0) == (y_val == 1.0)))
        accuracies.append(acc)
        if acc > best_acc:
            best_acc = acc
            best_epoch = epoch
            best = model.copy()

    best.metadata = {
        "seed": config.seed,
        "config": config.to_json(),
        "best_epoch": best_epoch,
        "best_val_accuracy": best_acc,
        "val_slides": val_slides,
        "train_slides": train_slides,
    }
    report = TrainReport(
        train_losses=losses,
        val_accuracies=accuracies,
        best_epoch=best_epoch,
        best_val_accuracy=best_acc,
        val_slides=val_slides,
    )
    return best, report


def predict(model: MlpModel, x: np.ndarray) -> tuple[float, int]:
    """Probability and thresholded label: 1 (cautery) iff P >= 0.5, i.e. z >= 0."""
    z = forward(model, x)
    return float(sigmoid(z)), int(z >= 0.0)


def predict_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionMismatch(f"batch shape {x.shape} does not match model dim {model.dim}")
    z, _, _ = _forward_batch(model, x, None, 0.0)
    return sigmoid(z), (z >= 0.0).astype(np.int64)


_MODEL_HEADER = struct.Struct("<4sIII")


def save_model(model: MlpModel, path: str | Path) -> None:
    h, d = model.w1.shape
    meta = json.dumps(model.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d, h))
        fh.write(np.ascontiguousarray(model.w1, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.b1, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(model.w2, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray([model.b2], dtype="<f4").tobytes())
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)


def load_model(path: str | Path) -> MlpModel:
    with open(path, "rb") as fh:
        magic, version, d, h = _MODEL_HEADER.unpack(
            _read_exact(fh, _MODEL_HEADER.size, "header")
        )
        if magic != MODEL_MAGIC:
            raise BadMagic(f"expected {MODEL_MAGIC!r}, got {magic!r}")
        if version != MODEL_VERSION:
            raise VersionMismatch(f"model version {version} unsupported")

        def read_f32(count: int, what: str) -> np.ndarray:
            raw = _read_exact(fh, 4 * count, what)
            return np.frombuffer(raw, dtype="<f4").astype(np.float64)

        w1 = read_f32(h * d, "hidden weights").reshape(h, d)
        b1 = read_f32(h, "hidden bias")
        w2 = read_f32(h, "output weights")
        b2 = float(read_f32(1, "output bias")[0])
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "metadata length"))
        meta = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
    return MlpModel(w1=w1, b1=b1, w2=w2, b2=b2, metadata=meta)


def _read_exact(fh, size: int, what: str) -> bytes:
    data = fh.read(size)
    if len(data) != size:
        raise TruncatedFile(f"file ended reading {what}")
    return data
