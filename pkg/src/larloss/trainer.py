"""Training and evaluation of the counting network.

The objective is MSE on the count plus ``lambda_dml`` times one metric
loss on the embedding head.  Batches are "smart": two samples per label.
"""
from __future__ import annotations

import csv
import enum
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import Dataset, Recording
from .errors import EmptySplitError, InsufficientLabelSamplesError, NonFiniteLossError
from .losses import EmbeddingBatch, LossKind, dml_loss, normalize
from .network import Model, NetworkConfig, backward_pass, forward_pass, model_checksum
from .radar import ChannelStats
from .smoothing import DEFAULT_ALPHA, SmoothingState, es_update

EVAL_CHUNK = 100


class DmlKind(str, enum.Enum):
    NONE = "none"
    TRIPLET = "triplet"
    MCNPAIR = "mcnpair"
    CONSTELLATION = "constellation"
    LAR = "lar"


# display names and row order of the benchmark table
TABLE_ORDER = (
    (DmlKind.NONE, "MSE"),
    (DmlKind.TRIPLET, "MSE + Triplet"),
    (DmlKind.MCNPAIR, "MSE + Mc-N-Pair"),
    (DmlKind.CONSTELLATION, "MSE + Constellation"),
    (DmlKind.LAR, "MSE + LAR"),
)


@dataclass(frozen=True)
class TrainConfig:
    dml_kind: DmlKind = DmlKind.NONE
    lambda_dml: float = 1.0
    lr: float = 3e-3
    momentum: float = 0.9
    grad_clip: float = 1.0
    epochs: int = 6
    samples_per_label: int = 2
    seed: int = 1
    margin: float = 1.0
    constellation_k: int = 3
    multiplier_offset: float = 0.0
    embedding_dim: int = 16
    smoothing_alpha: float = DEFAULT_ALPHA
    smooth_rounded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dml_kind", DmlKind(self.dml_kind))
        if self.lambda_dml < 0:
            raise ValueError("lambda_dml must be >= 0")
        if self.samples_per_label != 2:
            raise ValueError("smart batches hold exactly two samples per label")
        if self.epochs < 1 or not self.lr > 0:
            raise ValueError("epochs must be >= 1 and lr > 0")

    def to_flat(self) -> dict[str, object]:
        flat = asdict(self)
        flat["dml_kind"] = self.dml_kind.value
        return flat

    @classmethod
    def from_flat(cls, values: dict) -> "TrainConfig":
        from .dataset import _coerce

        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise KeyError(key)
            kwargs[key] = raw if key == "dml_kind" else _coerce(raw, types[key])
        return cls(**kwargs)


@dataclass
class EpochStats:
    epoch: int
    mse_term: float
    dml_term: float
    test_acc: float
    test_acc_pm1: float
    leftover: int


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    checksum: str = ""
    wall_clock_seconds: float = 0.0

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "mse_term", "dml_term", "test_acc", "test_acc_pm1"])
            for e in self.epochs:
                writer.writerow([e.epoch, repr(e.mse_term), repr(e.dml_term),
                                 repr(e.test_acc), repr(e.test_acc_pm1)])


@dataclass
class MetricsReport:
    accuracy: float
    accuracy_pm1: float
    confusion: np.ndarray  # rows true label, columns predicted label
    n_samples: int


class SmartBatcher:
    """Seeded epochs of batches holding exactly two samples of every label.

    Samples that do not fill a batch in one epoch are carried into the
    next epoch's pool instead of being dropped.
    """

    def __init__(self, labels, num_labels: int, seed: int):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.num_labels = num_labels
        self.rng = np.random.default_rng(seed)
        self.by_label = [np.flatnonzero(self.labels == c) for c in range(num_labels)]
        for c, idx in enumerate(self.by_label):
            if idx.size < 2:
                raise InsufficientLabelSamplesError(c, int(idx.size))
        self.carry = [np.zeros(0, dtype=np.int64) for _ in range(num_labels)]
        self.leftover = 0

    def epoch(self) -> list[np.ndarray]:
        pools = [np.concatenate([self.carry[c], self.rng.permutation(idx)])
                 for c, idx in enumerate(self.by_label)]
        n_batches = min(len(p) // 2 for p in pools)
        batches = []
        for b in range(n_batches):
            batches.append(np.concatenate([p[2 * b:2 * b + 2] for p in pools]))
        self.carry = [p[2 * n_batches:] for p in pools]
        self.leftover = sum(len(c) for c in self.carry)
        return batches


def smart_batch(labels, num_labels: int, seed: int) -> list[np.ndarray]:
    """One epoch of smart batches as index arrays."""
    return SmartBatcher(labels, num_labels, seed).epoch()


def forward(model: Model, inputs: np.ndarray, labels, num_labels: int):
    """(normalised embeddings, raw predictions) for already-standardised inputs."""
    raw_embeddings, predictions, _ = forward_pass(model, inputs)
    batch = EmbeddingBatch(normalize(raw_embeddings), labels, num_labels)
    return batch, predictions


def combined_objective(predictions, labels, raw_embeddings, config: TrainConfig, num_labels: int):
    """MSE and weighted metric-loss terms with their gradients.

    Returns (mse, dml, d_predictions, d_embeddings); d_embeddings is None
    when the metric term is disabled.
    """
    labels = np.asarray(labels)
    err = np.asarray(predictions, dtype=np.float64) - labels
    mse = float(np.mean(err**2))
    d_pred = 2.0 * err / err.size
    if config.dml_kind is DmlKind.NONE or config.lambda_dml == 0:
        return mse, 0.0, d_pred, None
    out = dml_loss(
        LossKind(config.dml_kind.value),
        EmbeddingBatch(raw_embeddings, labels, num_labels),
        margin=config.margin,
        constellation_k=min(config.constellation_k, len(np.unique(labels)) - 1),
        multiplier_offset=config.multiplier_offset,
    )
    return mse, out.value, d_pred, config.lambda_dml * out.grads


@dataclass
class Optimizer:
    """SGD with heavy-ball momentum."""

    lr: float
    momentum: float = 0.9
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, model: Model, grads: dict[str, np.ndarray]) -> None:
        if self.grad_clip > 0:
            norm = float(np.sqrt(sum(np.sum(np.square(g, dtype=np.float64)) for g in grads.values())))
            if norm > self.grad_clip:
                scale = self.grad_clip / norm
                grads = {name: g * np.asarray(scale, dtype=g.dtype) for name, g in grads.items()}
        for name, g in grads.items():
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            model.params[name] -= (self.lr * v).astype(model.params[name].dtype)


def train_step(model: Model, optimizer: Optimizer, inputs: np.ndarray, labels,
               config: TrainConfig, num_labels: int, epoch: int = 0, batch_index: int = 0):
    """One update on a standardised batch; returns (mse_term, dml_term)."""
    raw_embeddings, predictions, cache = forward_pass(model, inputs, keep_cache=True)
    mse, dml, d_pred, d_emb = combined_objective(predictions, labels, raw_embeddings, config, num_labels)
    total = mse + config.lambda_dml * dml
    if not np.isfinite(total):
        raise NonFiniteLossError(epoch, batch_index, total)
    grads = backward_pass(model, cache, d_pred, d_emb)
    optimizer.step(model, grads)
    return mse, dml


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def to_counts(values, num_labels: int) -> np.ndarray:
    return np.clip(round_half_away(values), 0, num_labels - 1).astype(np.int64)


def raw_predictions(model: Model, frames: np.ndarray) -> np.ndarray:
    """Un-rounded network outputs for un-standardised frames."""
    out = []
    for start in range(0, len(frames), EVAL_CHUNK):
        chunk = model.standardize(frames[start:start + EVAL_CHUNK])
        _, pred, _ = forward_pass(model, chunk)
        out.append(pred.astype(np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def smooth_stream(values, alpha: float) -> np.ndarray:
    state = SmoothingState(alpha)
    out = np.empty(len(values))
    for k, x in enumerate(values):
        state, out[k] = es_update(state, x)
    return out


def predict_from_raw(raw, num_labels: int, alpha: float | None = None,
                     smooth_rounded: bool = False) -> np.ndarray:
    """Optional smoothing, then round half away from zero and clamp to the label range."""
    raw = np.asarray(raw, dtype=np.float64)
    if alpha is None:
        return to_counts(raw, num_labels)
    if smooth_rounded:
        return to_counts(smooth_stream(to_counts(raw, num_labels), alpha), num_labels)
    return to_counts(smooth_stream(raw, alpha), num_labels)


def predict(model: Model, frames: np.ndarray, num_labels: int, alpha: float | None = None,
            smooth_rounded: bool = False) -> np.ndarray:
    """Integer counts for a time-ordered run of frames."""
    return predict_from_raw(raw_predictions(model, frames), num_labels, alpha, smooth_rounded)


def metrics(predictions, labels, num_labels: int) -> MetricsReport:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptySplitError("cannot evaluate an empty split")
    confusion = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return MetricsReport(
        accuracy=float(np.mean(predictions == labels)),
        accuracy_pm1=float(np.mean(np.abs(predictions - labels) <= 1)),
        confusion=confusion,
        n_samples=int(labels.size),
    )


def evaluate_raw(raw_by_recording, recordings, num_labels: int, alpha: float | None = None,
                 smooth_rounded: bool = False) -> MetricsReport:
    """Metrics from cached raw outputs; smoothing restarts at every recording."""
    if not recordings:
        raise EmptySplitError("cannot evaluate an empty split")
    preds, labels = [], []
    for raw, rec in zip(raw_by_recording, recordings):
        preds.append(predict_from_raw(raw, num_labels, alpha, smooth_rounded))
        labels.append(np.full(len(raw), rec.label))
    return metrics(np.concatenate(preds), np.concatenate(labels), num_labels)


def evaluate(model: Model, recordings: list[Recording], num_labels: int,
             alpha: float | None = None, smooth_rounded: bool = False) -> MetricsReport:
    raws = [raw_predictions(model, rec.frames) for rec in recordings]
    return evaluate_raw(raws, recordings, num_labels, alpha, smooth_rounded)


def train(dataset: Dataset, config: TrainConfig, progress=None) -> tuple[Model, TrainReport]:
    """Train one configuration; test metrics are recorded after every epoch."""
    started = time.perf_counter()
    num_labels = dataset.config.num_labels
    inputs, labels, _ = dataset.stacked("train")
    test = dataset.split("test")
    if not test:
        raise EmptySplitError("dataset has no test recordings")
    net_config = NetworkConfig(input_shape=tuple(inputs.shape[1:]),
                               embedding_dim=config.embedding_dim,
                               output_bias=(num_labels - 1) / 2.0)
    model = Model.create(net_config, config.seed)
    stats = ChannelStats.fit(inputs)
    model.input_mean = stats.mean.astype(np.float32)
    model.input_std = stats.std.astype(np.float32)
    standardized = model.standardize(inputs)

    batcher = SmartBatcher(labels, num_labels, config.seed)
    optimizer = Optimizer(config.lr, config.momentum, config.grad_clip)
    report = TrainReport()
    for epoch in range(1, config.epochs + 1):
        mse_sum = dml_sum = 0.0
        batches = batcher.epoch()
        for b, idx in enumerate(batches):
            mse, dml = train_step(model, optimizer, standardized[idx], labels[idx],
                                  config, num_labels, epoch, b)
            mse_sum += mse
            dml_sum += dml
        result = evaluate(model, test, num_labels)
        n = max(len(batches), 1)
        report.epochs.append(EpochStats(epoch, mse_sum / n, dml_sum / n,
                                        result.accuracy, result.accuracy_pm1, batcher.leftover))
        if progress is not None:
            progress(report.epochs[-1])
    report.checksum = model_checksum(model)
    report.wall_clock_seconds = time.perf_counter() - started
    return model, report


def write_embeddings_csv(model: Model, recordings: list[Recording], path: Path) -> None:
    """Normalised embeddings of every frame: sample_id, label, e_0..e_{D-1}."""
    dim = model.config.embedding_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label"] + [f"e_{i}" for i in range(dim)])
        sample_id = 0
        for rec in recordings:
            for start in range(0, len(rec.frames), EVAL_CHUNK):
                chunk = model.standardize(rec.frames[start:start + EVAL_CHUNK])
                emb, _, _ = forward_pass(model, chunk)
                for row in normalize(emb):
                    writer.writerow([sample_id, rec.label] + [repr(float(v)) for v in row])
                    sample_id += 1
