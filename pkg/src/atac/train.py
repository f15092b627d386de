"""Optimization recipe: Nesterov SGD, step schedule, epoch loop, metrics and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ad
from .autograd import Parameter, Tape
from .data import LabeledBatch, augment
from .units import ActivationKind
from .zoo import (
    MICRO_MODULES,
    ModelGraph,
    ReplacementPolicy,
    apply_replacement,
    build_resnet20v2,
    he_init,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "train_loss", "train_acc", "test_acc", "lr", "wall_time_sec")


class ConfigError(ValueError):
    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    # optimizer and schedule
    base_lr: float = 0.2
    epochs: int = 400
    weight_decay: float = 1e-4
    batch_size: int = 128
    momentum: float = 0.9
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] = (300, 350)
    seed: int = 0
    # data
    dataset: str = "cifar10"
    data_dir: str = ""
    checksum_file: str = ""
    train_subset: int = 0  # 0 keeps the whole split
    test_subset: int = 0
    augment: bool = True
    synthetic_n: int = 1000
    synthetic_test_n: int = 250
    synthetic_noise: float = 0.5
    image_size: int = 32
    num_classes: int = 0  # 0 derives it from the dataset
    # model
    blocks: int = 3
    activation: str = "relu"
    replacement_ratio: float = 0.0
    reduction_ratio: int = 2
    micro_module: str = "none"
    # bookkeeping
    log_wall_time: bool = False

    def __post_init__(self):
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)
        self.validate()

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise ConfigError(name, msg)

        need(self.base_lr >= 0 and math.isfinite(self.base_lr), "base_lr", "must be a finite number >= 0")
        need(self.epochs >= 1, "epochs", "must be >= 1")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(0 <= self.momentum < 1, "momentum", "must lie in [0, 1)")
        need(0 < self.lr_decay_factor <= 1, "lr_decay_factor", "must lie in (0, 1]")
        d = self.lr_decay_epochs
        need(all(a < b for a, b in zip(d, d[1:])), "lr_decay_epochs", "must be strictly increasing")
        need(all(0 < e < self.epochs for e in d), "lr_decay_epochs", f"entries must lie in (0, {self.epochs})")
        need(self.dataset in ("cifar10", "cifar100", "synthetic"), "dataset", "must be cifar10, cifar100 or synthetic")
        need(self.dataset == "synthetic" or self.data_dir, "data_dir", "required for CIFAR datasets")
        need(self.train_subset >= 0 and self.test_subset >= 0, "train_subset", "must be >= 0")
        need(self.image_size >= 4 and self.image_size % 4 == 0, "image_size", "must be a positive multiple of 4")
        need(self.dataset == "synthetic" or self.image_size == 32, "image_size", "CIFAR images are 32x32")
        need(self.synthetic_n >= 1 and self.synthetic_test_n >= 1, "synthetic_n", "must be >= 1")
        need(self.blocks >= 1, "blocks", "must be >= 1")
        need(0.0 <= self.replacement_ratio <= 1.0, "replacement_ratio", "must lie in [0, 1]")
        need(self.reduction_ratio >= 1, "reduction_ratio", "must be >= 1")
        need(self.micro_module in MICRO_MODULES, "micro_module", f"must be one of {MICRO_MODULES}")
        try:
            kind = ActivationKind.parse(self.activation)
        except ValueError as exc:
            raise ConfigError("activation", str(exc)) from None
        # every ResNet-20 site width is 16, 32 or 64
        for c in (16, 32, 64):
            if kind.has_unit and c % kind.r:
                raise ConfigError("activation", f"reduction ratio {kind.r} does not divide channel width {c}")
            if (self.replacement_ratio > 0 or self.micro_module == "nin") and c % self.reduction_ratio:
                raise ConfigError("reduction_ratio", f"{self.reduction_ratio} does not divide channel width {c}")
        need(self.resolved_num_classes >= 2, "num_classes", "must be >= 2")

    @property
    def resolved_num_classes(self) -> int:
        if self.num_classes:
            return self.num_classes
        return {"cifar10": 10, "cifar100": 100}.get(self.dataset, 10)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


@dataclass
class MetricsRow:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float | None
    lr: float
    wall_time_sec: float

    def csv_fields(self, include_wall_time: bool) -> list[str]:
        test = "" if self.test_acc is None else repr(self.test_acc)
        wall = repr(round(self.wall_time_sec, 3)) if include_wall_time else ""
        return [str(self.epoch), repr(self.train_loss), repr(self.train_acc), test, repr(self.lr), wall]


@dataclass
class TrainResult:
    rows: list[MetricsRow] = field(default_factory=list)
    checkpoint: Path | None = None


def build_model(cfg: TrainConfig) -> ModelGraph:
    """Host network for ``cfg``, He-initialized from ``cfg.seed``."""
    g = build_resnet20v2(
        cfg.blocks,
        cfg.resolved_num_classes,
        ActivationKind.parse(cfg.activation),
        cfg.micro_module,
        cfg.reduction_ratio,
        cfg.image_size,
    )
    if cfg.replacement_ratio > 0:
        g = apply_replacement(g, ReplacementPolicy(ratio=cfg.replacement_ratio), cfg.reduction_ratio)
    return he_init(g, cfg.seed)


# ---------------------------------------------------------------------------
# optimizer and schedule


def nag_step(p: Parameter, lr: float, momentum: float, weight_decay: float) -> None:
    """v <- mu*v + g; w <- w - lr*(g + mu*v), with g = grad + wd*w for decayed parameters."""
    if not np.all(np.isfinite(p.grad)):
        raise NumericAbort(f"non-finite gradient in parameter {p.name or p.shape}")
    g = p.grad + weight_decay * p.value if (p.decay and weight_decay) else p.grad
    p.momentum *= momentum
    p.momentum += g
    p.value -= lr * (g + momentum * p.momentum)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    passed = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.base_lr * cfg.lr_decay_factor**passed


# ---------------------------------------------------------------------------
# loop


def evaluate(graph: ModelGraph, data: LabeledBatch, batch_size: int = 500) -> tuple[float, float]:
    """(accuracy, mean loss) with BatchNorm in evaluation mode."""
    if data is None or len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    for i in range(0, len(data), batch_size):
        x, y = data.images[i : i + batch_size], data.labels[i : i + batch_size]
        tape = Tape(enabled=False)
        logits = graph.forward(x, tape, training=False)
        total_loss += float(ad.softmax_cross_entropy(logits, y).value) * len(y)
        correct += int((logits.value.argmax(axis=1) == y).sum())
        tape.clear()
    return correct / len(data), total_loss / len(data)


def epoch_seed(seed: int, epoch: int) -> list[int]:
    return [seed, epoch]


def train_epoch(cfg: TrainConfig, graph: ModelGraph, data: LabeledBatch, epoch: int) -> tuple[float, float]:
    lr = lr_at_epoch(cfg, epoch)
    rng = np.random.default_rng(epoch_seed(cfg.seed, epoch))
    order = rng.permutation(len(data))
    batch = data.subset(order)
    if cfg.augment:
        batch = augment(batch, epoch_seed(cfg.seed, epoch) + [1])
    params = graph.parameters()
    total_loss, correct = 0.0, 0
    for i in range(0, len(batch), cfg.batch_size):
        x, y = batch.images[i : i + cfg.batch_size], batch.labels[i : i + cfg.batch_size]
        tape = Tape()
        logits = graph.forward(x, tape, training=True)
        loss = ad.softmax_cross_entropy(logits, y)
        value = float(loss.value)
        if not math.isfinite(value):
            raise NumericAbort(f"non-finite loss at epoch {epoch}, batch starting at {i}")
        ad.backward(tape, loss)
        tape.clear()
        for p in params:
            nag_step(p, lr, cfg.momentum, cfg.weight_decay)
            p.zero_grad()
        total_loss += value * len(y)
        correct += int((logits.value.argmax(axis=1) == y).sum())
    return total_loss / len(batch), correct / len(batch)


def train(
    cfg: TrainConfig,
    graph: ModelGraph,
    train_data: LabeledBatch,
    test_data: LabeledBatch | None = None,
    run_dir=None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train ``graph`` from ``start_epoch`` up to ``stop_epoch`` (default: cfg.epochs).

    Checkpoints land in ``run_dir`` after every decay epoch and at the end. A
    non-finite loss raises :class:`NumericAbort` and leaves earlier checkpoints alone.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    stop = cfg.epochs if stop_epoch is None else stop_epoch
    run_dir = Path(run_dir) if run_dir is not None else None
    result = TrainResult()
    for p in graph.parameters():
        p.zero_grad()
    for epoch in range(start_epoch, stop):
        t0 = time.perf_counter()
        train_loss, train_acc = train_epoch(cfg, graph, train_data, epoch)
        test_acc = evaluate(graph, test_data)[0] if test_data is not None else None
        row = MetricsRow(epoch, train_loss, train_acc, test_acc, lr_at_epoch(cfg, epoch), time.perf_counter() - t0)
        result.rows.append(row)
        log.info("epoch %d loss %.4f train %.4f test %s", epoch, train_loss, train_acc, test_acc)
        if on_epoch is not None:
            on_epoch(row)
        if run_dir is not None and (epoch + 1 in cfg.lr_decay_epochs or epoch + 1 == stop):
            path = run_dir / f"checkpoint_epoch{epoch + 1}.ckpt"
            checkpoint_save(graph, path, epoch=epoch + 1)
            result.checkpoint = path
    return result


def write_metrics_csv(rows, path, include_wall_time: bool = False):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for row in rows:
            w.writerow(row.csv_fields(include_wall_time))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"ATAC-CHECKPOINT 1\n"


def _state(graph: ModelGraph):
    for name, p in graph.named_parameters().items():
        yield f"param:{name}", p.value
        yield f"momentum:{name}", p.momentum
    for name, buf in graph.buffers().items():
        yield f"buffer:{name}", buf


def checkpoint_save(graph: ModelGraph, path, epoch: int | None = None, extra: dict | None = None) -> Path:
    """Write the graph manifest as a JSON header followed by little-endian float64 payloads."""
    entries, payload = [], []
    for key, arr in _state(graph):
        entries.append([key, list(arr.shape)])
        payload.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"manifest": graph.manifest(), "epoch": epoch, "extra": extra or {}, "entries": entries})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(_MAGIC)
        f.write(header.encode() + b"\n")
        for chunk in payload:
            f.write(chunk)
    tmp.replace(path)
    return path


def read_checkpoint_header(path) -> tuple[dict, int]:
    with open(path, "rb") as f:
        if f.readline() != _MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        header = json.loads(f.readline())
        return header, f.tell()


def checkpoint_load(graph: ModelGraph, path) -> dict:
    """Restore parameters, momentum buffers and BN statistics; returns the header."""
    header, offset = read_checkpoint_header(path)
    mine, theirs = graph.manifest().splitlines(), header["manifest"].splitlines()
    for i, (a, b) in enumerate(zip(mine, theirs)):
        if a != b:
            raise CheckpointError(f"manifest mismatch at line {i}: checkpoint has '{b}', graph has '{a}'")
    if len(mine) != len(theirs):
        raise CheckpointError(f"manifest mismatch: checkpoint has {len(theirs)} lines, graph has {len(mine)}")
    raw = Path(path).read_bytes()[offset:]
    targets = dict(_state(graph))
    pos = 0
    for key, shape in header["entries"]:
        arr = targets.get(key)
        if arr is None or list(arr.shape) != shape:
            raise CheckpointError(f"checkpoint entry {key} {shape} does not match the graph")
        n = arr.size * 8
        arr[...] = np.frombuffer(raw[pos : pos + n], dtype="<f8").reshape(shape)
        pos += n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} unexpected trailing bytes")
    return header
