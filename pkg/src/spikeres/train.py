"""SGD with momentum, schedules, label-smoothed loss and the BPTT training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import ops
from .arch import Model
from .autograd import Tape, Tensor, no_tape
from .data import Augment, Dataset, batches
from .neuron import SpikeRecord

log = logging.getLogger(__name__)

METRIC_FIELDS = ["epoch", "split", "loss", "top1", "lr", "wall_seconds", "firing_rate"]


class NonFiniteLoss(RuntimeError):
    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


class MissingGradient(KeyError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 100
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 100
    schedule: str = "multistep"  # multistep | cosine
    milestones: tuple = (40, 60, 80)
    beta: float = 0.2
    label_smoothing: float = 0.0
    dropout: float = 0.0
    seed: int = 0
    timesteps: Optional[int] = None  # overrides the model's T when set
    eval_batch_size: int = 200

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.schedule not in ("multistep", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.lr < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("lr >= 0, batch_size >= 1 and epochs >= 0 required")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.timesteps is not None and self.timesteps < 1:
            raise ValueError("timesteps override must be >= 1")

    @classmethod
    def depth_analysis(cls, **kw) -> "TrainConfig":
        base = dict(lr=0.1, batch_size=100, momentum=0.9, weight_decay=0.0, epochs=100,
                    schedule="multistep", milestones=(40, 60, 80), beta=0.2)
        base.update(kw)
        return cls(**base)

    @classmethod
    def alternatives(cls, **kw) -> "TrainConfig":
        base = dict(lr=0.1, batch_size=100, momentum=0.9, weight_decay=1e-4, epochs=100,
                    schedule="cosine", label_smoothing=0.1, dropout=0.2)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.schedule == "multistep":
        passed = sum(1 for m in cfg.milestones if epoch >= m)
        return cfg.lr * cfg.beta ** passed
    if cfg.epochs == 0:
        return cfg.lr
    return cfg.lr * (1.0 + math.cos(math.pi * epoch / cfg.epochs)) / 2.0


def smoothed_targets(targets, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
    t = np.asarray(targets)
    if t.size and (t.min() < 0 or t.max() >= num_classes or not np.issubdtype(t.dtype, np.integer)):
        raise ValueError(f"targets must be class ids in [0, {num_classes})")
    q = np.full((len(t), num_classes), smoothing / num_classes)
    q[np.arange(len(t)), t] += 1.0 - smoothing
    return q


def loss(logits, targets, smoothing: float = 0.0) -> Tensor:
    """Cross-entropy against ``(1 - s) * onehot + s / C``, averaged over the batch."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return ops.softmax_cross_entropy(logits, smoothed_targets(targets, logits.shape[1], smoothing))


def top1(logits: np.ndarray, targets: np.ndarray) -> float:
    """Fraction correct; np.argmax resolves ties to the lowest class index."""
    return float(np.mean(np.argmax(logits, axis=1) == targets))


# -- optimiser ---------------------------------------------------------------

class SGD:
    """Momentum SGD: ``v <- m v + g + wd theta``; ``theta <- theta - lr v``."""

    def __init__(self, named_params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict = {}

    def step(self, grads, lr: float) -> None:
        missing = [n for n, p in self.params if p not in grads]
        if missing:
            raise MissingGradient(f"no gradient for trainable parameter(s): {', '.join(missing[:5])}")
        for name, p in self.params:
            g = np.asarray(grads[p], dtype=p.dtype)
            if self.weight_decay:
                g = g + p.dtype.type(self.weight_decay) * p.data
            v = self.buffers.get(name)
            if v is None or not self.momentum:
                v = g.copy()
            else:
                v = p.dtype.type(self.momentum) * v + g
            self.buffers[name] = v
            p.data = p.data - p.dtype.type(lr) * v

    def state(self) -> dict:
        return {k: v.copy() for k, v in self.buffers.items()}

    def load_state(self, state: dict) -> None:
        self.buffers = {k: np.array(v) for k, v in state.items()}


def sgd_step(model: Model, grads, cfg: TrainConfig, optimizer: Optional[SGD] = None,
             lr: Optional[float] = None) -> SGD:
    optimizer = optimizer or SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    optimizer.step(grads, cfg.lr if lr is None else lr)
    return optimizer


# -- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    metrics: list = field(default_factory=list)
    optimizer: Optional[SGD] = None
    rng: Optional[np.random.Generator] = None
    epochs_run: int = 0

    def final_metric(self, last: int = 5) -> Optional[float]:
        """Mean test top-1 over the last ``last`` epochs (train top-1 if no test split)."""
        for split in ("test", "train"):
            vals = [m["top1"] for m in self.metrics if m["split"] == split]
            if vals:
                return float(np.mean(vals[-last:]))
        return None

    def first_epoch_loss(self) -> Optional[float]:
        for m in self.metrics:
            if m["split"] == "train":
                return m["loss"]
        return None


def _diagnostic_dump(model: Model, record: Optional[SpikeRecord]) -> dict:
    norms = {n: float(np.linalg.norm(p.data.astype(np.float64))) for n, p in model.named_parameters()}
    rates = {}
    if record is not None:
        rates = {n: float(b.mean()) for n, b in record.layers.items()}
    return {"parameter_norms": norms, "firing_rates": rates}


def evaluate(model: Model, ds: Dataset, timesteps: Optional[int] = None, batch_size: int = 200,
             use_batch_stats: bool = False) -> tuple:
    """(mean loss, top-1, global firing rate) without recording a tape."""
    was_training = model.training
    model.train() if use_batch_stats else model.eval()
    total_loss = correct = 0.0
    spikes = neurons = 0
    try:
        with no_tape(), model.frozen_stats():
            for xb, yb in batches(ds, batch_size):
                rec = SpikeRecord()
                logits = model.forward(xb, timesteps, record=rec)
                total_loss += float(loss(logits, yb).item()) * len(yb)
                correct += float(np.sum(np.argmax(logits.data, axis=1) == yb))
                for bits in rec.layers.values():
                    spikes += int(np.count_nonzero(bits))
                    neurons += bits.size
    finally:
        model.train() if was_training else model.eval()
    n = len(ds)
    return total_loss / n, correct / n, spikes / neurons if neurons else 0.0


def evaluate_loss(model: Model, x, y, timesteps: Optional[int] = None, batch_size: int = 200) -> float:
    """Mean loss on fixed data; running statistics if available, else batch statistics."""
    ds = Dataset(np.asarray(x), np.asarray(y), model.spec.num_classes)
    have_stats = all(bn.updates > 0 for bn in model.bns())
    return evaluate(model, ds, timesteps, batch_size, use_batch_stats=not have_stats)[0]


def train(model: Model, train_ds: Dataset, cfg: TrainConfig, test_ds: Optional[Dataset] = None,
          augment: Optional[Augment] = None, metrics_path=None, start_epoch: int = 0,
          optimizer: Optional[SGD] = None, rng: Optional[np.random.Generator] = None,
          on_epoch: Optional[Callable] = None, track_rate: bool = True) -> TrainResult:
    """Full-BPTT training; one backward per mini-batch over the whole T-step unroll."""
    T = cfg.timesteps or model.spec.timesteps
    rng = rng or np.random.default_rng(cfg.seed)
    optimizer = optimizer or SGD(model.named_parameters(), cfg.momentum, cfg.weight_decay)
    result = TrainResult(model, optimizer=optimizer, rng=rng)
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    try:
        for epoch in range(start_epoch, cfg.epochs):
            lr = lr_at(cfg, epoch)
            model.train()
            t0 = time.perf_counter()
            tot_loss = correct = 0.0
            spikes = neurons = 0
            for xb, yb in batches(train_ds, cfg.batch_size, rng, augment):
                record = SpikeRecord() if track_rate else None
                with Tape() as tape:
                    logits = model.forward(xb, T, record=record, dropout=cfg.dropout, rng=rng)
                    batch_loss = loss(logits, yb, cfg.label_smoothing)
                    value = float(batch_loss.item())
                    if not math.isfinite(value):
                        dump = _diagnostic_dump(model, record)
                        raise NonFiniteLoss(f"non-finite loss {value} at epoch {epoch}", dump)
                    grads = tape.backward(batch_loss)
                optimizer.step(grads, lr)
                tot_loss += value * len(yb)
                correct += float(np.sum(np.argmax(logits.data, axis=1) == yb))
                if record is not None:
                    for bits in record.layers.values():
                        spikes += int(np.count_nonzero(bits))
                        neurons += bits.size
            wall = time.perf_counter() - t0
            n = len(train_ds)
            rows = [{"epoch": epoch, "split": "train", "loss": tot_loss / n, "top1": correct / n, "lr": lr,
                     "wall_seconds": wall, "firing_rate": spikes / neurons if neurons else 0.0}]
            if test_ds is not None:
                t1 = time.perf_counter()
                tl, ta, tr = evaluate(model, test_ds, T, cfg.eval_batch_size)
                rows.append({"epoch": epoch, "split": "test", "loss": tl, "top1": ta, "lr": lr,
                             "wall_seconds": time.perf_counter() - t1, "firing_rate": tr})
            for r in rows:
                result.metrics.append(r)
                if writer is not None:
                    writer.writerow(r)
            if fh is not None:
                fh.flush()
            log.info("epoch %d lr %.4g train loss %.4f top1 %.4f (%.1fs)", epoch, lr, rows[0]["loss"],
                     rows[0]["top1"], wall)
            result.epochs_run = epoch + 1
            if on_epoch is not None:
                on_epoch(epoch, result)
    finally:
        if fh is not None:
            fh.close()
    return result


def two_phase_train(model: Model, train_ds: Dataset, phase1: TrainConfig, phase2: TrainConfig,
                    test_ds: Optional[Dataset] = None, augment: Optional[Augment] = None,
                    checkpoint_path=None) -> tuple:
    """T=1 pretraining, then training at the model's full T with a fresh schedule.

    Returns ``(phase1_result, phase2_result)``. When ``checkpoint_path`` is
    given, phase 2 resumes from the saved phase-1 file rather than the live
    model, which exercises the hand-off exactly as a split run would.
    """
    from .checkpoint import load_checkpoint, restore_model, save_checkpoint

    full_T = phase2.timesteps or model.spec.timesteps
    p1 = replace(phase1, timesteps=1)
    r1 = train(model, train_ds, p1, test_ds, augment)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, r1.optimizer, r1.epochs_run, r1.rng, meta={"phase": 1})
        ck = load_checkpoint(checkpoint_path)
        if ck.spec.with_timesteps(full_T) != model.spec.with_timesteps(full_T):
            raise ValueError("phase-1 checkpoint describes a different network")
        model = restore_model(ck)
    p2 = replace(phase2, timesteps=full_T)
    r2 = train(model, train_ds, p2, test_ds, augment, rng=np.random.default_rng(phase2.seed))
    return r1, r2
