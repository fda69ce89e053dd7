"""ADAGRAD training loop, schedules, augmentation, evaluation, checkpoints.

The update rule is pinned exactly: ``accum += g**2`` then
``param -= lr * g / (sqrt(accum) + eps)`` with ``eps`` outside the square
root. No weight decay, momentum, or clipping. Runs are deterministic for a
fixed seed: data order, flip masks, and initialization all derive from it.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .arch import Network
from .data import Dataset, channel_stats
from .errors import CheckpointError, DataError, ShapeError
from .ops import softmax_cross_entropy
from .tensor import Graph, ParamStore, Tensor, backward, sgd_like_update

CHECKPOINT_MAGIC = b"ANCHCNN\x00"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "epoch,lr,train_loss,train_top1,test_top1,seconds"


@dataclass
class TrainConfig:
    """Optimizer hyperparameters and schedule.

    ``schedule`` lists (epoch, lr) step points with strictly increasing
    epochs; before the first point the learning rate is ``lr_initial``.
    """

    epochs: int
    batch_size: int = 128
    lr_initial: float = 0.1
    schedule: list[tuple[int, float]] = field(default_factory=list)
    augment_flip: bool = False
    seed: int = 0
    adagrad_eps: float = 1e-10

    def __post_init__(self):
        if self.epochs < 1:
            raise ShapeError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ShapeError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_initial <= 0 or any(lr <= 0 for _, lr in self.schedule):
            raise ShapeError("learning rates must be positive")
        epochs = [e for e, _ in self.schedule]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ShapeError("schedule epochs must be strictly increasing")

    @classmethod
    def cifar_default(cls, epochs: int = 90, lr: float = 0.1, **kw) -> "TrainConfig":
        """lr drops by 10x at the halfway epoch (45 for the 90-epoch run)."""
        schedule = [(epochs // 2, lr / 10)] if epochs >= 2 else []
        return cls(epochs=epochs, lr_initial=lr, schedule=schedule, **kw)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for ``epoch``: the last step point at or before it."""
    if not (0 <= epoch < config.epochs):
        raise ShapeError(f"epoch {epoch} outside [0, {config.epochs})")
    lr = config.lr_initial
    for step_epoch, step_lr in config.schedule:
        if step_epoch <= epoch:
            lr = step_lr
    return lr


class AdagradState:
    """Per-parameter accumulated squared gradients."""

    def __init__(self, params: ParamStore, eps: float = 1e-10):
        self.accum = {name: np.zeros_like(t.data) for name, t in params.entries.items()}
        self.eps = eps


def adagrad_step(params: ParamStore, state: AdagradState, lr: float) -> None:
    """One ADAGRAD update over every trainable entry; clears gradients."""
    for name, t in params.entries.items():
        if t.grad is None:
            raise ShapeError(f"parameter {name!r} has no gradient; run backward first")
    for name, t in params.entries.items():
        g = t.grad
        acc = state.accum[name]
        acc += g * g
        sgd_like_update(t, Tensor(lr * g / (np.sqrt(acc) + state.eps)))
    params.zero_grads()


def augment_flip(batch: Tensor, rng: np.random.Generator) -> Tensor:
    """Mirror each image left-right independently with probability 0.5."""
    if batch.data.ndim != 4:
        raise ShapeError(f"expected NCHW batch, got shape {list(batch.shape)}")
    out = batch.data.copy()
    mask = rng.random(batch.shape[0]) < 0.5
    out[mask] = out[mask, :, :, ::-1]
    return Tensor(out)


def normalize(batch: Tensor, means, stds) -> Tensor:
    """Per-channel ``(x - mean) / std`` over an NCHW batch."""
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if batch.data.ndim != 4 or means.shape != (batch.shape[1],) or stds.shape != (batch.shape[1],):
        raise ShapeError("normalize expects NCHW batch and per-channel means/stds")
    if np.any(stds <= 0):
        raise DataError("channel std must be positive; constant channels cannot be normalized")
    return Tensor((batch.data - means[None, :, None, None]) / stds[None, :, None, None])


def channel_stats_normalize(
    train_set: Dataset, test_set: Dataset | None = None
) -> tuple[Dataset, Dataset | None]:
    """Normalize splits with the training split's channel means and stds."""
    means, stds = channel_stats(train_set)

    def apply(ds: Dataset) -> Dataset:
        return Dataset(normalize(ds.images, means, stds), ds.labels, ds.class_count, ds.name)

    return apply(train_set), (apply(test_set) if test_set is not None else None)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    test_top1: float
    seconds: float


@dataclass
class RunMetrics:
    records: list[EpochRecord] = field(default_factory=list)

    def to_csv_lines(self) -> list[str]:
        lines = [METRICS_HEADER]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_top1!r},{r.test_top1!r},{r.seconds:.3f}"
            )
        return lines

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.to_csv_lines()) + "\n")


def top1_error(logits: np.ndarray, labels) -> float:
    """Percentage of rows whose argmax differs from the label."""
    y = np.asarray(labels, dtype=np.int64)
    if len(y) == 0:
        raise DataError("cannot score an empty sample set")
    pred = np.argmax(logits, axis=1)
    return 100.0 * (1.0 - float(np.mean(pred == y)))


def evaluate(net: Network, data: Dataset, batch_size: int = 256) -> float:
    """TOP-1 error (%) of the network on a dataset, eval-mode batch norm."""
    if len(data.labels) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, data.images.shape[0], batch_size):
        xb = Tensor(data.images.data[start : start + batch_size])
        logits = net.forward(xb, "eval")
        preds.append(np.argmax(logits.data, axis=1))
    pred = np.concatenate(preds)
    y = np.asarray(data.labels, dtype=np.int64)
    return 100.0 * (1.0 - float(np.mean(pred == y)))


def train(
    net: Network,
    data: Dataset,
    config: TrainConfig,
    test_data: Dataset | None = None,
) -> RunMetrics:
    """Run the full training loop and return per-epoch metrics.

    Data order is reshuffled every epoch from the run seed; train TOP-1 is
    measured after each epoch with an eval-mode pass over the (unaugmented)
    training set, so the final entry matches a post-hoc evaluation of the
    final checkpoint exactly. Expects pre-normalized data.
    """
    n = data.images.shape[0]
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = AdagradState(net.params, eps=config.adagrad_eps)
    metrics = RunMetrics()

    for epoch in range(config.epochs):
        t0 = time.monotonic()
        lr = lr_at(config, epoch)
        order = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = Tensor(data.images.data[idx])
            yb = [data.labels[i] for i in idx]
            if config.augment_flip:
                xb = augment_flip(xb, rng)
            graph = Graph()
            with graph:
                logits = net.forward(xb, "train")
                loss = softmax_cross_entropy(logits, yb)
            backward(graph, loss, net.params)
            adagrad_step(net.params, state, lr)
            loss_sum += float(loss.data) * len(idx)

        train_err = evaluate(net, data)
        test_err = evaluate(net, test_data) if test_data is not None else float("nan")
        metrics.records.append(
            EpochRecord(epoch, lr, loss_sum / n, train_err, test_err, time.monotonic() - t0)
        )
    return metrics


# ---------------------------------------------------------------------------
# checkpoints: magic, version, then per-entry name/kind/shape/float64 data

def save_checkpoint(params: ParamStore, path) -> None:
    """Binary dump of all parameters and buffers, little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        items = [(name, t, 0) for name, t in params.entries.items()]
        items += [(name, t, 1) for name, t in params.buffers.items()]
        fh.write(struct.pack("<I", len(items)))
        for name, tensor, kind in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", kind, tensor.data.ndim))
            fh.write(struct.pack(f"<{tensor.data.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(params: ParamStore, path) -> None:
    """Load a checkpoint into an already-built store; shapes must match."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    offset = len(CHECKPOINT_MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if offset + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (count,) = take("<I")
    seen = set()
    for _ in range(count):
        (name_len,) = take("<H")
        if offset + name_len > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        kind, ndim = take("<BB")
        shape = take(f"<{ndim}I")
        n_values = int(np.prod(shape)) if ndim else 1
        size = n_values * 8
        if offset + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset).reshape(shape)
        offset += size
        target_map = params.entries if kind == 0 else params.buffers
        if name not in target_map:
            raise CheckpointError(f"checkpoint entry {name!r} unknown to this network")
        target = target_map[name]
        if target.shape != tuple(shape):
            raise CheckpointError(
                f"checkpoint entry {name!r} has shape {list(shape)}, network expects {list(target.shape)}"
            )
        target.data[...] = values
        seen.add((kind, name))
    expected = {(0, n) for n in params.entries} | {(1, n) for n in params.buffers}
    missing = expected - seen
    if missing:
        raise CheckpointError(f"checkpoint missing {len(missing)} entries, e.g. {sorted(missing)[0][1]!r}")
