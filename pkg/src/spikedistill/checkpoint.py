"""Checkpoint format: text manifest + little-endian binary blob.

The manifest (the checkpoint path itself) lists one line per tensor:
``name dtype shape offset``, preceded by ``# cfg key=value`` comment lines
that carry the network and neuron configuration so a checkpoint is
self-describing. Tensor data lives concatenated in manifest order in a
sibling ``<path>.bin`` blob, IEEE-754 little-endian.
"""

from __future__ import annotations

import os

import numpy as np

from .neurons import LIFConfig
from .network import Network, build_network, spec_from_config, spec_to_config


class CheckpointError(ValueError):
    """Raised when a manifest or blob is malformed or inconsistent."""


def _all_tensors(net: Network):
    for name, t in net.params.items():
        yield name, t.data
    for name, arr in net.buffers().items():
        yield name, arr


def save_checkpoint(net: Network, path):
    cfg = spec_to_config(net.spec)
    cfg["lif.tau"] = repr(net.lif_cfg.tau)
    cfg["lif.threshold"] = repr(net.lif_cfg.threshold)
    cfg["lif.surrogate_width"] = repr(net.lif_cfg.surrogate_width)

    lines = ["# spikedistill checkpoint v1"]
    for k in sorted(cfg):
        lines.append(f"# cfg {k}={cfg[k]}")
    offset = 0
    chunks = []
    for name, arr in _all_tensors(net):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {arr.dtype.name} {shape} {offset}")
        chunks.append(le.tobytes())
        offset += len(chunks[-1])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(str(path) + ".bin", "wb") as fh:
        for c in chunks:
            fh.write(c)


def read_manifest(path):
    cfg = {}
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("# cfg "):
                k, _, v = line[len("# cfg "):].partition("=")
                cfg[k.strip()] = v.strip()
                continue
            if line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise CheckpointError(f"malformed manifest line: {line!r}")
            name, dtype, shape, offset = parts
            try:
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
                entries.append((name, np.dtype(dtype), dims, int(offset)))
            except (TypeError, ValueError) as e:
                raise CheckpointError(f"malformed manifest line: {line!r}") from e
    return cfg, entries


def load_tensors(path):
    """Read a checkpoint into {name: array} without building a network."""
    cfg, entries = read_manifest(path)
    blob_path = str(path) + ".bin"
    if not os.path.exists(blob_path):
        raise CheckpointError(f"missing checkpoint blob: {blob_path}")
    blob = open(blob_path, "rb").read()
    expected = sum(int(np.prod(dims or (1,))) * dt.itemsize for _, dt, dims, _ in entries)
    if len(blob) != expected:
        raise CheckpointError(f"blob size mismatch: {len(blob)} bytes, manifest expects {expected}")
    out = {}
    for name, dt, dims, offset in entries:
        count = int(np.prod(dims or (1,)))
        arr = np.frombuffer(blob, dtype=dt.newbyteorder("<"), count=count, offset=offset)
        out[name] = arr.astype(dt).reshape(dims).copy()
    return cfg, out


def load_checkpoint(path) -> Network:
    """Rebuild a network from a checkpoint's embedded configuration."""
    cfg, tensors = load_tensors(path)
    try:
        spec = spec_from_config(cfg)
        lif = LIFConfig(float(cfg["lif.tau"]), float(cfg["lif.threshold"]), float(cfg["lif.surrogate_width"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"checkpoint missing or bad configuration: {e}") from e
    net = build_network(spec, lif, seed=0)
    if not any(n.startswith("weak.") for n in tensors):
        net = Network(spec, lif, net.params.without_weak(), net.bn_states, has_weak=False)
    for name, t in net.params.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {name}")
        if tensors[name].shape != t.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {tensors[name].shape} vs {t.data.shape}")
        t.data = tensors[name].astype(t.data.dtype)
    for name, arr in net.buffers().items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing buffer {name}")
        arr[...] = tensors[name]
    return net
