"""Leaky integrate-and-fire dynamics with a rectangular surrogate gradient.

Membrane update per timestep: H <- (1 - 1/tau) * H_prev + I.
A neuron fires when H >= threshold (ties fire) and is soft-reset by
subtracting the threshold. During backward the spike's derivative w.r.t.
the pre-reset membrane is a rectangle of width `surrogate_width` and height
1/surrogate_width centered at the threshold; the reset path does not
propagate gradient through the discrete spike value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _result, _wants_grad


@dataclass(frozen=True)
class LIFConfig:
    tau: float = 2.0
    threshold: float = 1.0
    surrogate_width: float = 1.0

    def __post_init__(self):
        if not self.tau >= 1.0:
            raise ValueError(f"tau must be >= 1 (leak factor in [0,1)), got {self.tau}")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if not self.surrogate_width > 0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")

    @property
    def leak(self) -> float:
        return 1.0 - 1.0 / self.tau


@dataclass
class LIFState:
    """Post-reset membrane potentials of one layer, one entry per neuron."""

    membrane: np.ndarray

    @classmethod
    def zeros(cls, shape, dtype=np.float32):
        return cls(np.zeros(shape, dtype=dtype))


def lif_step(state: LIFState, current: np.ndarray, cfg: LIFConfig):
    """One membrane update / spike / soft-reset step (plain arrays, no tape).

    Returns (spikes, new_state); spikes are exactly 0.0 or 1.0.
    """
    current = np.asarray(current)
    if current.shape != state.membrane.shape:
        raise ShapeError("lif_step", current.shape, state.membrane.shape)
    if not np.all(np.isfinite(current)):
        raise FloatingPointError("lif_step: non-finite input current")
    h_pre = cfg.leak * state.membrane + current
    spikes = (h_pre >= cfg.threshold).astype(current.dtype)
    h_post = h_pre - cfg.threshold * spikes
    return spikes, LIFState(h_post)


def spike_backward(membrane, cfg: LIFConfig):
    """Surrogate dS/dH at the given pre-reset membrane potentials.

    1/width inside the open window |H - threshold| < width/2, else 0.
    """
    membrane = np.asarray(membrane)
    a = cfg.surrogate_width
    window = np.abs(membrane - cfg.threshold) < (a / 2.0)
    return window.astype(membrane.dtype) / a


def lif_sequence(currents: Tensor, cfg: LIFConfig, T: int, spike_mode: str = "surrogate") -> Tensor:
    """Unroll LIF dynamics over T timesteps as one tape operation.

    ``currents`` has leading shape [T*B, ...]; timestep t occupies rows
    [t*B, (t+1)*B). Membrane starts at zero and threads through the
    sequence. ``spike_mode="identity"`` replaces the spike function and
    reset with a pure leaky integrator (for gradient checking the leak and
    accumulation paths).
    """
    if T < 1:
        raise ValueError(f"lif_sequence: T must be >= 1, got {T}")
    if spike_mode not in ("surrogate", "identity"):
        raise ValueError(f"lif_sequence: unknown spike_mode {spike_mode!r}")
    if currents.shape[0] % T != 0:
        raise ShapeError("lif_sequence", currents.shape, (T,))
    B = currents.shape[0] // T
    step_shape = (B,) + currents.shape[1:]

    x = currents.data.reshape((T,) + step_shape)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("lif_sequence: non-finite input current")
    leak = cfg.leak
    h_pre_seq = np.empty_like(x)
    out = np.empty_like(x)
    h = np.zeros(step_shape, dtype=x.dtype)
    for t in range(T):
        h_pre = leak * h + x[t]
        h_pre_seq[t] = h_pre
        if spike_mode == "surrogate":
            s = (h_pre >= cfg.threshold).astype(x.dtype)
            out[t] = s
            h = h_pre - cfg.threshold * s
        else:
            out[t] = h_pre
            h = h_pre

    def bwd(g):
        if not currents.requires_grad:
            return
        gs = g.reshape((T,) + step_shape)
        gx = np.empty_like(gs)
        carry = np.zeros(step_shape, dtype=gs.dtype)
        for t in range(T - 1, -1, -1):
            if spike_mode == "surrogate":
                d_pre = gs[t] * spike_backward(h_pre_seq[t], cfg) + carry
            else:
                d_pre = gs[t] + carry
            gx[t] = d_pre
            carry = leak * d_pre
        currents.accumulate_grad(gx.reshape(currents.shape))

    return _result(out.reshape(currents.shape), (currents,), bwd, currents.requires_grad)
