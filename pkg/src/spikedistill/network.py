"""Staged spiking convolutional networks with an optional weak classifier.

A network is a list of conv stages (each stage: conv-BN-LIF blocks, optional
trailing 2x2 average pool) followed by a global-average-pool + fully
connected head that produces per-timestep logits. A small weak classifier
(conv-BN-LIF-GAP-FC) can tap the spike output of an interior stage; it is a
pure side branch and never perturbs the main path.

All timesteps of a batch share one parameter set. Conv and BN process the
time-flattened [T*B, ...] layout, so train-mode BN statistics aggregate over
every timestep of the batch; LIF layers unroll the time axis internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .neurons import LIFConfig, lif_sequence
from .tensor import BatchNormState, ParamSet, Tensor


class SpecError(ValueError):
    """Raised for invalid network specifications."""


@dataclass(frozen=True)
class StageSpec:
    channels: tuple
    pool: bool = False


@dataclass(frozen=True)
class WeakClassifierSpec:
    """Conv(3x3, same channel count) + BN + LIF + GAP + FC head."""

    channels: int | None = None  # None: match the tapped stage's channels


@dataclass
class NetworkSpec:
    stages: list
    input_channels: int = 2
    input_size: int = 16
    num_classes: int = 4
    attach_stage: int | None = None  # tap after this stage (0-based); default second-to-last
    weak: WeakClassifierSpec = field(default_factory=WeakClassifierSpec)

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageSpec) else StageSpec(tuple(s[0]), bool(s[1])) for s in self.stages]
        if not self.stages:
            raise SpecError("network needs at least one stage")
        for s in self.stages:
            if not s.channels or any(c < 1 for c in s.channels):
                raise SpecError(f"stage channel counts must be positive, got {s.channels}")
        if self.attach_stage is None:
            self.attach_stage = len(self.stages) - 2
        if not 1 <= self.attach_stage <= len(self.stages) - 2:
            raise SpecError(
                f"attach_stage must be strictly interior (1..{len(self.stages) - 2}), got {self.attach_stage}"
            )
        if self.input_channels < 1 or self.input_size < 1 or self.num_classes < 2:
            raise SpecError("input_channels/input_size/num_classes out of range")

    def head_input_channels(self):
        return self.stages[-1].channels[-1]

    def spatial_after(self, stage_idx):
        size = self.input_size
        for s in self.stages[: stage_idx + 1]:
            if s.pool:
                size //= 2
        return size


# preset used by the desk-scale experiments: a VGG-style stack shrunk until
# full training runs fit a CPU budget, keeping the interior tap point
VGG_MINI = [((8,), False), ((16,), False), ((16,), True), ((32,), True)]


def vgg_mini_spec(input_channels=2, input_size=8, num_classes=4):
    return NetworkSpec(
        stages=list(VGG_MINI),
        input_channels=input_channels,
        input_size=input_size,
        num_classes=num_classes,
    )


@dataclass
class ForwardRecord:
    final_logits: Tensor  # [T, batch, classes]
    weak_logits: Tensor | None  # [T, batch, classes]
    stage_spikes: list | None  # per-stage [T, batch, C, H, W] arrays
    T: int


class Network:
    """Parameterized spiking network instance (see build_network)."""

    def __init__(self, spec: NetworkSpec, lif_cfg: LIFConfig, params: ParamSet, bn_states: dict, has_weak=True):
        self.spec = spec
        self.lif_cfg = lif_cfg
        self.params = params
        self.bn_states = bn_states
        self.has_weak = has_weak
        self.steps_executed = 0

    def buffers(self):
        """Non-trainable per-layer state (BN running statistics), named."""
        out = {}
        for name, st in self.bn_states.items():
            if not self.has_weak and name.startswith("weak."):
                continue
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_network(spec: NetworkSpec, lif_cfg: LIFConfig = None, seed: int = 0, dtype=np.float32) -> Network:
    """Deterministically initialize a network from a seed.

    Conv/FC weights are Kaiming-uniform over fan-in, biases zero, BN scale 1
    and shift 0. Weak-classifier parameters are tagged so they can be
    stripped at inference.
    """
    lif_cfg = lif_cfg or LIFConfig()
    rng = np.random.default_rng(seed)
    params = ParamSet()
    bn_states = {}

    def add_conv_bn(prefix, cin, cout, weak=False):
        w = _kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype)
        params.add(f"{prefix}.w", Tensor(w), weak=weak)
        params.add(f"{prefix}.b", Tensor(np.zeros(cout, dtype=dtype)), weak=weak)
        params.add(f"{prefix}.bn.gamma", Tensor(np.ones(cout, dtype=dtype)), weak=weak)
        params.add(f"{prefix}.bn.shift", Tensor(np.zeros(cout, dtype=dtype)), decay=False, weak=weak)
        bn_states[f"{prefix}.bn"] = BatchNormState(cout, dtype=dtype)

    cin = spec.input_channels
    for si, stage in enumerate(spec.stages):
        for ci, cout in enumerate(stage.channels):
            add_conv_bn(f"stage{si}.conv{ci}", cin, cout)
            cin = cout

    head_in = spec.head_input_channels()
    params.add("head.w", Tensor(_kaiming_uniform(rng, (head_in, spec.num_classes), head_in, dtype)))
    params.add("head.b", Tensor(np.zeros(spec.num_classes, dtype=dtype)))

    tap_c = spec.stages[spec.attach_stage].channels[-1]
    weak_c = spec.weak.channels or tap_c
    add_conv_bn("weak.conv", tap_c, weak_c, weak=True)
    params.add("weak.fc.w", Tensor(_kaiming_uniform(rng, (weak_c, spec.num_classes), weak_c, dtype)), weak=True)
    params.add("weak.fc.b", Tensor(np.zeros(spec.num_classes, dtype=dtype)), weak=True)

    return Network(spec, lif_cfg, params, bn_states)


def _conv_block(net, prefix, x, T, training, spike_mode="surrogate"):
    p = net.params
    y = tz.conv2d(x, p[f"{prefix}.w"], p[f"{prefix}.b"])
    y = tz.batchnorm(y, p[f"{prefix}.bn.gamma"], p[f"{prefix}.bn.shift"], net.bn_states[f"{prefix}.bn"], training)
    return lif_sequence(y, net.lif_cfg, T, spike_mode=spike_mode)


def _time_major_input(x, T, dtype):
    """Build the [T*B, C, H, W] drive from a static or event-frame batch."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 4:  # static [B,C,H,W]: direct encoding, repeat at every step
        flat = np.broadcast_to(x, (T,) + x.shape).reshape((T * x.shape[0],) + x.shape[1:])
        return np.ascontiguousarray(flat)
    if x.ndim == 5:  # event frames [B, T_data, C, H, W]
        if x.shape[1] < T:
            raise ValueError(f"event input provides {x.shape[1]} frames but T={T} requested")
        tm = np.transpose(x[:, :T], (1, 0, 2, 3, 4))
        return np.ascontiguousarray(tm.reshape((T * x.shape[0],) + x.shape[2:]))
    raise ValueError(f"input must be [B,C,H,W] or [B,T,C,H,W], got ndim={x.ndim}")


def forward_timesteps(net: Network, x, T: int, training=False, record_spikes=False, include_weak=True) -> ForwardRecord:
    """Run the network for T timesteps and collect per-step logits.

    Static [B,C,H,W] inputs are presented identically at every step; event
    [B,T_data,C,H,W] inputs use their first T frames. LIF membranes start at
    zero and persist across the T steps of this call only.
    """
    if T < 1:
        raise ValueError(f"forward_timesteps: T must be >= 1, got {T}")
    dtype = net.params["head.w"].dtype
    drive = Tensor(_time_major_input(x, T, dtype))
    B = drive.shape[0] // T

    h = drive
    stage_spikes = [] if record_spikes else None
    tap = None
    for si, stage in enumerate(net.spec.stages):
        for ci in range(len(stage.channels)):
            h = _conv_block(net, f"stage{si}.conv{ci}", h, T, training)
        if record_spikes:
            stage_spikes.append(h.data.reshape((T, B) + h.shape[1:]).copy())
        if si == net.spec.attach_stage:
            tap = h
        if stage.pool:
            h = tz.avgpool2d(h)

    pooled = tz.global_avg_pool(h)
    logits = tz.linear(pooled, net.params["head.w"], net.params["head.b"])
    final_logits = tz.reshape(logits, (T, B, net.spec.num_classes))

    weak_logits = None
    if include_weak and net.has_weak:
        wh = _conv_block(net, "weak.conv", tap, T, training)
        wp = tz.global_avg_pool(wh)
        wl = tz.linear(wp, net.params["weak.fc.w"], net.params["weak.fc.b"])
        weak_logits = tz.reshape(wl, (T, B, net.spec.num_classes))

    net.steps_executed += T
    return ForwardRecord(final_logits, weak_logits, stage_spikes, T)


def strip_weak_classifier(net: Network) -> Network:
    """Inference network without the weak head; main path is untouched."""
    stripped = Network(net.spec, net.lif_cfg, net.params.without_weak(), net.bn_states, has_weak=False)
    return stripped


# ---------------------------------------------------------------------------
# NetworkSpec <-> flat key-value config


def spec_to_config(spec: NetworkSpec) -> dict:
    stages = ",".join("+".join(str(c) for c in s.channels) + (":pool" if s.pool else "") for s in spec.stages)
    return {
        "model.stages": stages,
        "model.input_channels": str(spec.input_channels),
        "model.input_size": str(spec.input_size),
        "model.num_classes": str(spec.num_classes),
        "model.attach_stage": str(spec.attach_stage),
    }


def spec_from_config(cfg: dict) -> NetworkSpec:
    stages = []
    for part in cfg["model.stages"].split(","):
        part = part.strip()
        pool = part.endswith(":pool")
        if pool:
            part = part[: -len(":pool")]
        channels = tuple(int(c) for c in part.split("+"))
        stages.append(StageSpec(channels, pool))
    return NetworkSpec(
        stages=stages,
        input_channels=int(cfg["model.input_channels"]),
        input_size=int(cfg["model.input_size"]),
        num_classes=int(cfg["model.num_classes"]),
        attach_stage=int(cfg["model.attach_stage"]),
    )
