"""Flat key-value run configuration with section prefixes.

Config files hold ``section.key = value`` lines ('#' comments allowed).
Command-line flags override file values; the merged result is echoed to
``resolved.cfg`` in the output directory so every run is reproducible from
its artifacts. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import DistillConfig
from .network import NetworkSpec, spec_from_config, spec_to_config
from .neurons import LIFConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for unparseable or unknown configuration input."""


DEFAULTS = {
    "model.stages": "8,16,16:pool,32:pool",
    "model.input_channels": "2",
    "model.input_size": "8",
    "model.num_classes": "4",
    "model.attach_stage": "2",
    "lif.tau": "2.0",
    "lif.threshold": "1.0",
    "lif.surrogate_width": "1.0",
    "distill.ts": "2",
    "distill.tt": "4",
    "distill.alpha": "1.0",
    "distill.beta": "1.0",
    "distill.detach_tsd_teacher": "false",
    "distill.detach_ssd_teacher": "true",
    "train.lr": "0.1",
    "train.momentum": "0.9",
    "train.weight_decay": "1e-4",
    "train.epochs": "100",
    "train.batch_size": "64",
    "train.lr_step": "30",
    "train.lr_gamma": "0.1",
    "train.seed": "0",
    "train.augment": "false",
    "data.kind": "moving-bar",
    "data.train_n": "2000",
    "data.test_n": "400",
    "data.noise": "0.0",
    "data.images": "",
    "data.labels": "",
    "data.test_images": "",
    "data.test_labels": "",
    "out.dir": "runs/default",
}


def parse_config_text(text) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = value.strip()
    return out


def load_config_file(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e


def _bool(v):
    if v.lower() in ("true", "1", "yes"):
        return True
    if v.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {v!r}")


@dataclass
class RunConfig:
    """Merged view of every component configuration plus run plumbing."""

    raw: dict
    spec: NetworkSpec
    lif: LIFConfig
    distill: DistillConfig
    train: TrainConfig
    augment: bool
    data_kind: str
    data_train_n: int
    data_test_n: int
    data_noise: float
    data_paths: dict
    out_dir: str

    @classmethod
    def build(cls, file_values=None, overrides=None):
        raw = dict(DEFAULTS)
        raw.update(file_values or {})
        for k, v in (overrides or {}).items():
            if v is None:
                continue
            if k not in DEFAULTS:
                raise ConfigError(f"unknown override key {k!r}")
            raw[k] = str(v)
        try:
            spec = spec_from_config(raw)
            lif = LIFConfig(float(raw["lif.tau"]), float(raw["lif.threshold"]), float(raw["lif.surrogate_width"]))
            distill = DistillConfig(
                t_student=int(raw["distill.ts"]), t_teacher=int(raw["distill.tt"]),
                alpha=float(raw["distill.alpha"]), beta=float(raw["distill.beta"]),
                detach_tsd_teacher=_bool(raw["distill.detach_tsd_teacher"]),
                detach_ssd_teacher=_bool(raw["distill.detach_ssd_teacher"]),
            )
            train = TrainConfig(
                lr=float(raw["train.lr"]), momentum=float(raw["train.momentum"]),
                weight_decay=float(raw["train.weight_decay"]), epochs=int(raw["train.epochs"]),
                batch_size=int(raw["train.batch_size"]), lr_step=int(raw["train.lr_step"]),
                lr_gamma=float(raw["train.lr_gamma"]), seed=int(raw["train.seed"]),
            )
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return cls(
            raw=raw, spec=spec, lif=lif, distill=distill, train=train,
            augment=_bool(raw["train.augment"]), data_kind=raw["data.kind"],
            data_train_n=int(raw["data.train_n"]), data_test_n=int(raw["data.test_n"]),
            data_noise=float(raw["data.noise"]),
            data_paths={k: raw[f"data.{k}"] for k in ("images", "labels", "test_images", "test_labels")},
            out_dir=raw["out.dir"],
        )

    def resolved_text(self):
        merged = dict(self.raw)
        merged.update(spec_to_config(self.spec))
        return "\n".join(f"{k} = {merged[k]}" for k in sorted(merged)) + "\n"


def derive_seed(master: int, stream: int) -> int:
    """Splitmix64-style expansion of one master seed into worker seeds."""
    with np.errstate(over="ignore"):
        z = (np.uint64(master) + np.uint64(0x9E3779B97F4A7C15) * np.uint64(stream + 1)) & np.uint64(2**64 - 1)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return int(z & np.uint64(2**31 - 1))
