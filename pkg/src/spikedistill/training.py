"""End-to-end training: shared-run forward, loss composition, momentum SGD.

One forward pass over the extended T_t timesteps supplies everything: the
per-timestep final logits (task loss and temporal-teacher average), the
student average over the first T_s steps, and the weak classifier's
per-step logits. Parameters update with classical momentum SGD (weight
decay folded into the velocity); the learning rate steps down by a fixed
factor every `lr_step` epochs.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .losses import DistillConfig, LossBreakdown, average_logits, ssd_loss, task_loss, total_loss, tsd_loss
from .network import Network, forward_timesteps
from .tensor import ParamSet, Tape


class DivergenceError(RuntimeError):
    """Raised when the training loss turns non-finite."""


@dataclass
class TrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    lr_step: int = 30
    lr_gamma: float = 0.1
    seed: int = 0
    weak_task_loss: bool = False  # ablation: include weak logits in the task CE

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 (train-mode BN), got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


class MomentumState:
    """Per-parameter velocity buffers mirroring a ParamSet."""

    def __init__(self, params: ParamSet):
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def buffer(self, name):
        return self.velocity[name]


@dataclass
class MetricsRow:
    epoch: int
    split: str
    task_loss: float
    tsd_loss: float
    ssd_loss: float
    total_loss: float
    accuracy: float
    weak_accuracy: float
    wall_seconds: float

    FIELDS = ("epoch", "split", "task_loss", "tsd_loss", "ssd_loss", "total_loss", "accuracy", "weak_accuracy", "wall_seconds")


def write_metrics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRow.FIELDS)
        for r in rows:
            writer.writerow([getattr(r, f) for f in MetricsRow.FIELDS])


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr * gamma^floor(epoch / lr_step)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr * cfg.lr_gamma ** (epoch // cfg.lr_step)


def sgd_update(params: ParamSet, momentum_state: MomentumState, lr: float, momentum: float, weight_decay: float):
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Weight decay skips parameters tagged decay=False (BN shift).
    """
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if g.shape != t.data.shape:
            raise tz.ShapeError("sgd_update", g.shape, t.data.shape)
        v = momentum_state.buffer(name)
        wd = weight_decay if params.meta(name)["decay"] else 0.0
        v *= momentum
        v += g
        if wd:
            v += wd * t.data
        t.data -= lr * v


def compute_losses(record, labels, distill_cfg: DistillConfig, weak_task: bool = False) -> LossBreakdown:
    """Compose the three loss components from one T_t forward record."""
    ts, tt = distill_cfg.t_student, distill_cfg.t_teacher
    final = record.final_logits
    student_slice = tz.take_front(final, ts)
    task = task_loss(student_slice, labels)

    student_avg = average_logits(final, ts)
    teacher_avg = average_logits(final, tt)
    if distill_cfg.detach_tsd_teacher:
        teacher_avg = teacher_avg.detach()
    tsd = tsd_loss(student_avg, teacher_avg)

    if record.weak_logits is not None:
        weak_slice = tz.take_front(record.weak_logits, ts)
        ssd_target = student_avg.detach() if distill_cfg.detach_ssd_teacher else student_avg
        ssd = ssd_loss(weak_slice, ssd_target)
        if weak_task:
            task = tz.add(task, task_loss(weak_slice, labels))
    else:
        ssd = tz.scale(tsd, 0.0)  # weak head skipped: spatial term is exactly zero

    return total_loss(task, tsd, ssd, distill_cfg)


def train_step(net: Network, batch, distill_cfg: DistillConfig, train_cfg: TrainConfig,
               momentum_state: MomentumState, lr: float = None) -> LossBreakdown:
    """One forward/backward/update over a (inputs, labels) batch."""
    x, labels = batch
    lr = train_cfg.lr if lr is None else lr
    net.params.zero_grad()
    # the weak branch only matters when its loss terms are active
    need_weak = net.has_weak and (distill_cfg.beta != 0.0 or train_cfg.weak_task_loss)
    with Tape():
        record = forward_timesteps(net, x, distill_cfg.t_teacher, training=True, include_weak=need_weak)
        breakdown = compute_losses(record, labels, distill_cfg, weak_task=train_cfg.weak_task_loss)
        if not np.isfinite(breakdown.total):
            raise DivergenceError(f"non-finite training loss: {breakdown}")
        tz.backward(breakdown.tensor, net.params)
    sgd_update(net.params, momentum_state, lr, train_cfg.momentum, train_cfg.weight_decay)
    return breakdown


def iterate_batches(n, batch_size, rng=None):
    """Yield index arrays; shuffled when an rng is given, drop no samples."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(net: Network, dataset, t_infer: int, batch_size: int = 256):
    """Accuracy of argmax of the t_infer-averaged logits, BN in inference mode.

    Returns (accuracy, weak_accuracy); weak_accuracy is NaN when the weak
    head is absent. Runs exactly t_infer timesteps per sample.
    """
    x, labels = dataset
    n = len(labels)
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    hits = 0
    weak_hits = 0
    for idx in iterate_batches(n, batch_size):
        record = forward_timesteps(net, x[idx], t_infer, training=False)
        avg = record.final_logits.data.mean(axis=0)
        hits += int((avg.argmax(axis=1) == labels[idx]).sum())
        if record.weak_logits is not None:
            wavg = record.weak_logits.data.mean(axis=0)
            weak_hits += int((wavg.argmax(axis=1) == labels[idx]).sum())
    weak_acc = weak_hits / n if net.has_weak else float("nan")
    return hits / n, weak_acc


def train_loop(net: Network, train_set, test_set, distill_cfg: DistillConfig, train_cfg: TrainConfig,
               augment_fn=None, on_epoch=None):
    """Full training schedule; returns the list of MetricsRow (train + test).

    ``augment_fn(x_batch, rng) -> x_batch`` is applied per batch on the
    training split only. ``on_epoch(epoch, test_acc)`` can observe progress
    (e.g. for best-checkpoint saving).
    """
    x_train, y_train = train_set
    rng = np.random.default_rng(train_cfg.seed)
    momentum_state = MomentumState(net.params)
    rows = []
    t0 = time.perf_counter()
    for epoch in range(train_cfg.epochs):
        lr = lr_at(epoch, train_cfg)
        sums = np.zeros(4)
        nb = 0
        for idx in iterate_batches(len(y_train), train_cfg.batch_size, rng):
            if len(idx) < 2:
                continue  # train-mode BN needs at least two samples
            xb = x_train[idx]
            if augment_fn is not None:
                xb = augment_fn(xb, rng)
            b = train_step(net, (xb, y_train[idx]), distill_cfg, train_cfg, momentum_state, lr)
            sums += (b.task, b.tsd, b.ssd, b.total)
            nb += 1
        task, tsd, ssd, total = (sums / max(nb, 1)).tolist()
        # train accuracy on a fixed-size head of the split keeps epochs cheap
        n_eval = min(len(y_train), 512)
        train_acc, train_weak = evaluate(net, (x_train[:n_eval], y_train[:n_eval]), distill_cfg.t_student)
        rows.append(MetricsRow(epoch, "train", task, tsd, ssd, total, train_acc, train_weak,
                               time.perf_counter() - t0))
        test_acc, test_weak = evaluate(net, test_set, distill_cfg.t_student)
        rows.append(MetricsRow(epoch, "test", task, tsd, ssd, total, test_acc, test_weak,
                               time.perf_counter() - t0))
        if on_epoch is not None:
            on_epoch(epoch, test_acc)
    return rows
