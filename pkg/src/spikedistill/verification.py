"""Finite-difference verification of the differentiable primitives.

Three check graphs, all in double precision with the identity spike mode
(the discrete spike has no meaningful numeric derivative):
  * fc: a single fully connected layer;
  * conv_stack: conv + avgpool + leaky integrator + fc;
  * batchnorm: train-mode BN on batch 4 (looser tolerance: the batch
    statistics couple every entry).
BN is checked without a preceding conv bias: bias followed by train-mode BN
has an exactly zero gradient, which turns the relative-error denominator
floor into pure finite-difference noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .neurons import LIFConfig, lif_sequence
from .tensor import ParamSet, Tensor, gradcheck


def fc_gradcheck(seed=0, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    w = params.add("w", Tensor(rng.normal(0, 0.5, (3, 2))))
    b = params.add("b", Tensor(rng.normal(0, 0.1, 2)))
    x = rng.normal(0, 1, (4, 3))
    labels = rng.integers(0, 2, 4)

    def loss_fn():
        return tz.softmax_cross_entropy(tz.linear(Tensor(x), w, b), labels)

    return gradcheck(loss_fn, params, epsilon=epsilon)


def conv_stack_gradcheck(seed=0, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    w1 = params.add("w1", Tensor(rng.normal(0, 0.4, (3, 2, 3, 3))))
    b1 = params.add("b1", Tensor(rng.normal(0, 0.1, 3)))
    w2 = params.add("w2", Tensor(rng.normal(0, 0.4, (3, 5))))
    b2 = params.add("b2", Tensor(rng.normal(0, 0.1, 5)))
    x = rng.normal(0, 1, (8, 2, 4, 4))  # T=2, batch 4
    labels = rng.integers(0, 5, 8)
    cfg = LIFConfig()

    def loss_fn():
        h = tz.conv2d(Tensor(x), w1, b1)
        h = lif_sequence(h, cfg, 2, spike_mode="identity")
        h = tz.avgpool2d(h)
        h = tz.global_avg_pool(h)
        return tz.softmax_cross_entropy(tz.linear(h, w2, b2), labels)

    return gradcheck(loss_fn, params, epsilon=epsilon)


def batchnorm_gradcheck(seed=0, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    params = ParamSet()
    gamma = params.add("gamma", Tensor(1.0 + rng.normal(0, 0.1, 3)))
    shift = params.add("shift", Tensor(rng.normal(0, 0.1, 3)))
    w = params.add("w", Tensor(rng.normal(0, 0.4, (3, 2))))
    b = params.add("b", Tensor(rng.normal(0, 0.1, 2)))
    x = rng.normal(0, 1, (4, 3, 4, 4))
    labels = rng.integers(0, 2, 4)

    def loss_fn():
        st = tz.BatchNormState(3, dtype=np.float64)
        h = tz.batchnorm(Tensor(x), gamma, shift, st, training=True)
        h = tz.global_avg_pool(h)
        return tz.softmax_cross_entropy(tz.linear(h, w, b), labels)

    return gradcheck(loss_fn, params, epsilon=epsilon)


def all_gradchecks(seed=0):
    """Named max relative errors for every check graph."""
    return {
        "fc": fc_gradcheck(seed),
        "conv_stack": conv_stack_gradcheck(seed),
        "batchnorm": batchnorm_gradcheck(seed),
    }


def composite_gradcheck(seed=0):
    """Overall worst relative error across all check graphs."""
    return max(all_gradchecks(seed).values())
