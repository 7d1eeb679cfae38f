"""Loss components for self-distilled SNN training.

Three scalars combine into the training objective:
  task  -- per-timestep cross-entropy on the final logits, summed over the
           first T_s steps (batch-mean per step);
  tsd   -- temporal self-distillation: squared L2 distance between the
           T_s-averaged and T_t-averaged final logits of one shared run;
  ssd   -- spatial self-distillation: per-step squared L2 distance between
           the weak classifier's logits and the (detached) T_s-averaged
           final logits, summed over the first T_s steps.

Distances operate on raw averaged logits; softmax appears only inside the
cross-entropy. Reduction convention everywhere: sum over classes, mean over
the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class DistillConfig:
    t_student: int = 2  # timesteps used at inference (T_s)
    t_teacher: int = 4  # extended timesteps during training (T_t)
    alpha: float = 1.0  # temporal distillation weight
    beta: float = 1.0  # spatial distillation weight
    detach_tsd_teacher: bool = False
    detach_ssd_teacher: bool = True

    def __post_init__(self):
        if not 1 <= self.t_student <= self.t_teacher:
            raise ValueError(f"need 1 <= t_student <= t_teacher, got {self.t_student}, {self.t_teacher}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"loss weights must be non-negative, got alpha={self.alpha}, beta={self.beta}")


@dataclass
class LossBreakdown:
    task: float
    tsd: float
    ssd: float
    total: float
    tensor: Tensor  # scalar total, attached to the active tape


def average_logits(per_timestep: Tensor, over: int) -> Tensor:
    """Mean of the first `over` timestep slices: [T,B,L] -> [B,L]."""
    return tz.mean_front(per_timestep, over)


def task_loss(per_timestep: Tensor, labels) -> Tensor:
    """Sum over timesteps of batch-mean cross-entropy on [T,B,L] logits."""
    T, B, L = per_timestep.shape
    flat = tz.reshape(per_timestep, (T * B, L))
    tiled = np.tile(np.asarray(labels), T)
    # mean over T*B rows equals (1/T) * sum_t mean_B; rescale to a sum over t
    return tz.scale(tz.softmax_cross_entropy(flat, tiled), float(T))


def tsd_loss(student_avg: Tensor, teacher_avg: Tensor) -> Tensor:
    """Squared L2 distance (class-sum, batch-mean) between averaged logits."""
    if student_avg.shape != teacher_avg.shape:
        raise ShapeError("tsd_loss", student_avg.shape, teacher_avg.shape)
    return tz.sq_distance(student_avg, teacher_avg)


def ssd_loss(weak_per_t: Tensor, final_avg: Tensor) -> Tensor:
    """Sum over timesteps of the weak-vs-final squared L2 distance.

    weak_per_t: [T_s, B, L]; final_avg: [B, L] (detach upstream when the
    teacher side must not receive gradient).
    """
    T, B, L = weak_per_t.shape
    if final_avg.shape != (B, L):
        raise ShapeError("ssd_loss", weak_per_t.shape, final_avg.shape)
    weak_flat = tz.reshape(weak_per_t, (T * B, L))
    target = tz.tile_front(final_avg, T)
    # sq_distance averages over all T*B rows; rescale to sum over t, mean over B
    return tz.scale(tz.sq_distance(weak_flat, target), float(T))


def total_loss(task: Tensor, tsd: Tensor, ssd: Tensor, cfg: DistillConfig) -> LossBreakdown:
    """Weighted combination task + alpha*tsd + beta*ssd."""
    total = tz.add(task, tz.add(tz.scale(tsd, cfg.alpha), tz.scale(ssd, cfg.beta)))
    return LossBreakdown(task=task.item(), tsd=tsd.item(), ssd=ssd.item(), total=total.item(), tensor=total)
