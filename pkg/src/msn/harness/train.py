"""Mini-batch training, evaluation and memory-activation monitoring."""
from __future__ import annotations

import csv
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numerics import ContractError, NonFiniteError
from .data import SyntheticDataset
from .flops import count_flops
from .metrics import UndefinedMetricError, auc, bce_loss, qauc
from .model import BlockStack
from .optim import WarmupSchedule, make_optimizer

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step, batch_indices, loss):
        self.step = step
        self.batch_indices = batch_indices
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at step {step}; batch sample ids "
            f"{batch_indices[:8].tolist()}{'...' if len(batch_indices) > 8 else ''}"
        )


@dataclass
class TrainConfig:
    lr: float = 0.05
    warmup_steps: int = 2000
    floor_fraction: float = 0.001
    epochs: int = 1
    max_steps: int | None = None
    batch_size: int = 256
    optimizer: str = "sgd"
    seed: int = 0
    strict_mode: bool = True
    histogram_each_epoch: bool = True

    def __post_init__(self):
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError("optimizer must be 'sgd' or 'adam'")

    def schedule(self) -> WarmupSchedule:
        return WarmupSchedule(self.lr, self.warmup_steps, self.floor_fraction)


@dataclass
class ActivationHistogram:
    counts: np.ndarray  # (n,) summed over MSN layers
    per_layer: np.ndarray  # (msn_layers, n)
    k: int
    samples: int

    def coverage(self) -> np.ndarray:
        """Fraction of slots selected at least once, per MSN layer."""
        return (self.per_layer > 0).mean(axis=1)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["slot", "count"] + [f"layer{i}" for i in range(self.per_layer.shape[0])])
            for slot in range(self.counts.shape[0]):
                w.writerow([slot, int(self.counts[slot])] + [int(c) for c in self.per_layer[:, slot]])
        return path


def activation_histogram(model: BlockStack, data, batch_size: int = 4096) -> ActivationHistogram:
    """Per-slot selection counts over one pass of ``data`` (features array or dataset)."""
    if model.msn_layer_count == 0:
        raise ContractError("activation_histogram needs at least one MSN layer")
    x = data.features if isinstance(data, SyntheticDataset) else np.asarray(data, dtype=np.float64)
    n = model.cfg.n
    per_layer = np.zeros((model.msn_layer_count, n), dtype=np.int64)
    for start in range(0, len(x), batch_size):
        _, tape = model.forward(x[start:start + batch_size])
        for li, sel in enumerate(BlockStack.selections(tape)):
            per_layer[li] += np.bincount(sel.reshape(-1), minlength=n)
    return ActivationHistogram(per_layer.sum(axis=0), per_layer, model.cfg.k, len(x))


def evaluate(model: BlockStack, data: SyntheticDataset) -> dict:
    logits = model.predict(data.features)
    loss, _ = bce_loss(logits, data.labels)
    out = {"loss": float(np.mean(loss))}
    try:
        out["auc"] = auc(logits, data.labels)
    except UndefinedMetricError:
        out["auc"] = None
    try:
        out["qauc"] = qauc(data.query_ids, logits, data.labels)
    except UndefinedMetricError:
        out["qauc"] = None
    return out


class MetricsLogger:
    """Append-only JSON-lines writer; appends are serialized with a lock."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.write_text("")

    def append(self, record: dict):
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a") as fh:
                    fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: BlockStack
    log: list
    histograms: list = field(default_factory=list)
    steps: int = 0


def train_step(model: BlockStack, optimizer, x, y, lr: float) -> float:
    """One forward/backward/update on a batch; returns the mean batch loss."""
    logits, tape = model.forward(x)
    loss, d_logit = bce_loss(logits, y)
    grads = model.backward(tape, d_logit / len(y))
    optimizer.step(grads, lr)
    return float(np.mean(loss))


def train(model: BlockStack, data: SyntheticDataset, cfg: TrainConfig, eval_data: SyntheticDataset | None = None,
          logger: MetricsLogger | None = None, histogram_dir=None,
          histogram_data: SyntheticDataset | None = None) -> TrainResult:
    """Mini-batch training with linear LR warm-up.

    After each epoch (and at ``max_steps``) one record is logged with the
    epoch's mean training loss and AUC/QAUC on ``eval_data`` (or ``data``).
    With ``histogram_dir`` set, each epoch's activation histogram is written
    there and its file name logged as ``histogram_path``. Histograms count
    selections over ``histogram_data`` (default: the training data).
    """
    if data.d_in != model.cfg.d_in:
        raise ContractError(f"data has d_in={data.d_in}, model expects {model.cfg.d_in}")
    logger = logger or MetricsLogger()
    eval_data = eval_data if eval_data is not None else data
    schedule = cfg.schedule()
    optimizer = make_optimizer(cfg.optimizer, model.parameters())
    flops = count_flops(model).to_dict()
    rng = np.random.default_rng(cfg.seed)
    histograms = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[start:start + cfg.batch_size]
            lr = schedule(step)
            try:
                batch_loss = train_step(model, optimizer, data.features[idx], data.labels[idx], lr)
            except NonFiniteError as exc:
                # memory layers reject non-finite activations before the loss is formed
                raise TrainingDivergedError(step, idx, float("nan")) from exc
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(step, idx, batch_loss)
            losses.append(batch_loss)
            step += 1
        metrics = evaluate(model, eval_data)
        record = {
            "step": step,
            "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else None,
            "eval_loss": metrics["loss"],
            "auc": metrics["auc"],
            "qauc": metrics["qauc"],
            "lr": schedule(step),
            "flops_report": flops,
            "histogram_path": None,
        }
        if cfg.histogram_each_epoch and model.msn_layer_count:
            hist = activation_histogram(model, histogram_data if histogram_data is not None else data)
            histograms.append((step, hist))
            record["slot_coverage"] = hist.coverage().tolist()
            if histogram_dir is not None:
                name = f"histogram_step{step}.csv"
                hist.to_csv(Path(histogram_dir) / name)
                record["histogram_path"] = name  # relative to histogram_dir
        logger.append(record)
        log.info("epoch %d step %d loss %s qauc %s", epoch, step, record["loss"], record["qauc"])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return TrainResult(model, logger.records, histograms, step)
