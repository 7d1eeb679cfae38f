"""High-level run orchestration shared by the CLI and the experiment suite."""

from __future__ import annotations

import os

import numpy as np

from . import datasets as ds
from .checkpoint import save_checkpoint
from .config import RunConfig, derive_seed
from .network import build_network
from .training import evaluate, train_loop, write_metrics


def load_datasets(cfg: RunConfig):
    """Materialize (train, test) splits according to the data section."""
    kind = cfg.data_kind
    if kind == "bars":
        size = cfg.spec.input_size
        ncls = cfg.spec.num_classes
        train = ds.synth_dataset("bars", cfg.data_train_n, noise=cfg.data_noise,
                                 seed=derive_seed(cfg.train.seed, 1), size=size, num_classes=ncls)
        test = ds.synth_dataset("bars", cfg.data_test_n, noise=cfg.data_noise,
                                seed=derive_seed(cfg.train.seed, 2), size=size, num_classes=ncls)
        return train, test
    if kind == "moving-bar":
        target = cfg.spec.input_size
        train = ds.synth_dataset("moving-bar", cfg.data_train_n, noise=cfg.data_noise,
                                 seed=derive_seed(cfg.train.seed, 1), target=target)
        test = ds.synth_dataset("moving-bar", cfg.data_test_n, noise=cfg.data_noise,
                                seed=derive_seed(cfg.train.seed, 2), target=target)
        return train, test
    if kind == "idx":
        for key in ("images", "labels", "test_images", "test_labels"):
            path = cfg.data_paths[key]
            if not path:
                raise ds.DataFormatError(f"data.{key} is required for data.kind=idx")
            if not os.path.exists(path):
                raise ds.DataFormatError(f"dataset path does not exist: {path}")
        train = ds.load_idx(cfg.data_paths["images"], cfg.data_paths["labels"])
        test = ds.load_idx(cfg.data_paths["test_images"], cfg.data_paths["test_labels"])
        return (train.images, train.labels), (test.images, test.labels)
    raise ds.DataFormatError(f"unknown data.kind {kind!r}")


def run_training(cfg: RunConfig, out_dir=None, quiet=False):
    """Train per the run configuration; write metrics, checkpoints, resolved.cfg.

    Returns (network, metrics rows, final test accuracy).
    """
    out_dir = out_dir or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as fh:
        fh.write(cfg.resolved_text())

    train_set, test_set = load_datasets(cfg)
    net = build_network(cfg.spec, cfg.lif, seed=cfg.train.seed)
    augment_fn = ds.augment_batch if cfg.augment else None

    best = {"acc": -1.0}

    def on_epoch(epoch, test_acc):
        if test_acc > best["acc"]:
            best["acc"] = test_acc
            save_checkpoint(net, os.path.join(out_dir, "checkpoint_best"))
        if not quiet:
            print(f"epoch {epoch}: test accuracy {test_acc:.4f}")

    rows = train_loop(net, train_set, test_set, cfg.distill, cfg.train, augment_fn=augment_fn, on_epoch=on_epoch)
    write_metrics(os.path.join(out_dir, "metrics.csv"), rows)
    save_checkpoint(net, os.path.join(out_dir, "checkpoint_final"))
    final_acc, _ = evaluate(net, test_set, cfg.distill.t_student)
    return net, rows, final_acc
