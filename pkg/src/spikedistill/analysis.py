"""Analysis instruments: risk estimators, firing-rate maps, early exit.

The risk experiment compares two Monte-Carlo estimators of a fixed
predictor's population risk over a finite-context toy distribution: the
empirical estimator indexes each sampled loss vector by the drawn label,
while the distilled estimator weights it by the context's full class
probability vector, removing label-sampling noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network, forward_timesteps


@dataclass
class ToyDistribution:
    """Finite context set with per-context class probabilities."""

    class_probs: np.ndarray  # [n_contexts, L], rows sum to 1
    context_weights: np.ndarray  # [n_contexts], sums to 1

    def __post_init__(self):
        self.class_probs = np.asarray(self.class_probs, dtype=np.float64)
        self.context_weights = np.asarray(self.context_weights, dtype=np.float64)
        if np.any(self.class_probs < 0) or not np.allclose(self.class_probs.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("class_probs rows must be probability vectors")
        if np.any(self.context_weights < 0) or not np.isclose(self.context_weights.sum(), 1.0, atol=1e-9):
            raise ValueError("context_weights must be a probability vector")


def toy2_distribution() -> ToyDistribution:
    """Two equally likely contexts with mixed labels (the standard demo)."""
    return ToyDistribution(class_probs=[[0.7, 0.3], [0.2, 0.8]], context_weights=[0.5, 0.5])


@dataclass
class RiskReport:
    empirical_mean: float
    empirical_var: float
    distilled_mean: float
    distilled_var: float
    variance_ratio: float  # distilled / empirical
    population_risk: float
    n: int
    m: int

    def csv_rows(self):
        yield ("estimator", "mean", "variance")
        yield ("empirical", self.empirical_mean, self.empirical_var)
        yield ("distilled", self.distilled_mean, self.distilled_var)
        yield ("variance_ratio", self.variance_ratio, "")
        yield ("population_risk", self.population_risk, "")


def empirical_risk(labels, predictor_losses) -> float:
    """Mean of the label-indexed loss entries over the sample."""
    labels = np.asarray(labels)
    losses = np.asarray(predictor_losses, dtype=np.float64)
    if losses.ndim != 2 or len(labels) != len(losses):
        raise ValueError(f"need one loss vector per label: {losses.shape} vs {labels.shape}")
    if labels.min() < 0 or labels.max() >= losses.shape[1]:
        raise ValueError("label out of range for loss vectors")
    return float(losses[np.arange(len(labels)), labels].mean())


def bayes_distilled_risk(class_probs, predictor_losses) -> float:
    """Mean of probability-weighted losses over the sample."""
    probs = np.asarray(class_probs, dtype=np.float64)
    losses = np.asarray(predictor_losses, dtype=np.float64)
    if probs.shape != losses.shape:
        raise ValueError(f"probs/losses shape mismatch: {probs.shape} vs {losses.shape}")
    if np.any(probs < 0) or not np.allclose(probs.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("class probability rows must sum to 1")
    return float((probs * losses).sum(axis=1).mean())


def population_risk(dist: ToyDistribution, context_losses) -> float:
    """Exact risk of a fixed predictor: E_x[p*(x)^T L(f(x))]."""
    losses = np.asarray(context_losses, dtype=np.float64)
    per_context = (dist.class_probs * losses).sum(axis=1)
    return float((dist.context_weights * per_context).sum())


def variance_experiment(dist: ToyDistribution, context_losses, n: int, m: int, seed: int = 0) -> RiskReport:
    """Monte-Carlo comparison of the two risk estimators.

    Draws m samples of size n (contexts from the weights; labels from each
    context's class distribution for the empirical estimator) and reports
    the mean and variance of both estimators.
    """
    if n < 2 or m < 2:
        raise ValueError(f"need n, m >= 2, got n={n}, m={m}")
    losses = np.asarray(context_losses, dtype=np.float64)
    rng = np.random.default_rng(seed)
    k = len(dist.context_weights)
    emp = np.empty(m)
    dis = np.empty(m)
    for j in range(m):
        ctx = rng.choice(k, size=n, p=dist.context_weights)
        sample_losses = losses[ctx]
        probs = dist.class_probs[ctx]
        labels = (rng.random(n)[:, None] > probs.cumsum(axis=1)).sum(axis=1)
        emp[j] = empirical_risk(labels, sample_losses)
        dis[j] = bayes_distilled_risk(probs, sample_losses)
    emp_var = float(emp.var(ddof=1))
    dis_var = float(dis.var(ddof=1))
    ratio = dis_var / emp_var if emp_var > 0 else 1.0
    return RiskReport(float(emp.mean()), emp_var, float(dis.mean()), dis_var, ratio,
                      population_risk(dist, losses), n, m)


# ---------------------------------------------------------------------------
# spike firing rate maps


def sfr_map(net: Network, inputs, T: int, stage: int):
    """Spatial firing-rate map of a stage: mean over timesteps/batch/channels.

    Returns (map [H, W] in [0,1], scalar mean rate).
    """
    if not 0 <= stage < len(net.spec.stages):
        raise ValueError(f"stage index {stage} out of range 0..{len(net.spec.stages) - 1}")
    record = forward_timesteps(net, inputs, T, training=False, record_spikes=True, include_weak=False)
    spikes = record.stage_spikes[stage]  # [T, B, C, H, W]
    rate_map = spikes.mean(axis=(0, 1, 2))
    return rate_map, float(spikes.mean())


def write_pgm(path, rate_map):
    """8-bit max-normalized P5 image of a firing-rate map."""
    arr = np.asarray(rate_map, dtype=np.float64)
    peak = arr.max()
    img = np.zeros_like(arr, dtype=np.uint8) if peak <= 0 else np.round(arr / peak * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


# ---------------------------------------------------------------------------
# weak-classifier early exit


def early_exit_eval(net: Network, dataset, t_infer: int, confidence_threshold: float = None,
                    batch_size: int = 256):
    """Accuracy of the full network, the weak head, and a blended early exit.

    With a threshold, samples whose weak softmax maximum reaches it are
    answered by the weak head; the rest fall through to the final logits.
    Returns (full_acc, weak_acc, blended_acc, exit_fraction).
    """
    if not net.has_weak:
        raise ValueError("early_exit_eval requires a network with the weak head retained")
    x, labels = dataset
    n = len(labels)
    if n == 0:
        raise ValueError("early_exit_eval: empty dataset")
    full_hits = weak_hits = blended_hits = exits = 0
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        record = forward_timesteps(net, x[sl], t_infer, training=False)
        favg = record.final_logits.data.mean(axis=0)
        wavg = record.weak_logits.data.mean(axis=0)
        fpred = favg.argmax(axis=1)
        wpred = wavg.argmax(axis=1)
        y = labels[sl]
        full_hits += int((fpred == y).sum())
        weak_hits += int((wpred == y).sum())
        if confidence_threshold is not None:
            z = wavg - wavg.max(axis=1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=1, keepdims=True)
            exit_mask = probs.max(axis=1) >= confidence_threshold
            pred = np.where(exit_mask, wpred, fpred)
            blended_hits += int((pred == y).sum())
            exits += int(exit_mask.sum())
    full_acc = full_hits / n
    weak_acc = weak_hits / n
    if confidence_threshold is None:
        return full_acc, weak_acc, full_acc, 0.0
    return full_acc, weak_acc, blended_hits / n, exits / n
