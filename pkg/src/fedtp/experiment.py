"""Glue from an :class:`ExperimentConfig` to datasets, partitions and simulations."""

from __future__ import annotations

import dataclasses

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import ExperimentConfig
from .datagen import LabeledDataset, load_cifar, synth_char_task, synth_image_task
from .federation import ClientState, Simulation, make_clients
from .models import IMAGE, NEXT_TOKEN, ModelConfig
from .partition import (
    PartitionManifest,
    apply_noise_ladder,
    partition_dirichlet,
    partition_pachinko,
    partition_pathological,
)


def build_dataset(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "synth_image":
        return synth_image_task(d.num_classes, d.per_class, d.extent, d.seed, d.channels, d.noise)
    if d.kind == "synth_char":
        return synth_char_task(d.vocab, d.seq_len, d.num_styles, d.per_style, d.seed)
    if d.path is None:
        raise ValueError(f"dataset.path is required for {d.kind}")
    return load_cifar(d.path, d.kind)


def model_config_for(cfg: ExperimentConfig, ds: LabeledDataset) -> ModelConfig:
    """The configured model, with task and input/output sizes taken from the data."""
    m = cfg.model
    if cfg.dataset.kind == "synth_char":
        return dataclasses.replace(m, task=NEXT_TOKEN, vocab_size=cfg.dataset.vocab, seq_len=cfg.dataset.seq_len)
    _, c, h, _ = ds.inputs.shape
    return dataclasses.replace(m, task=IMAGE, channels=c, image_extent=h, num_classes=ds.num_classes)


def build_manifest(cfg: ExperimentConfig, ds: LabeledDataset) -> PartitionManifest:
    p = cfg.partition
    if p.scheme == "pathological":
        return partition_pathological(ds, p.num_clients, p.classes_per_client, p.seed)
    if p.scheme == "dirichlet":
        return partition_dirichlet(ds, p.num_clients, p.alpha, p.seed)
    return partition_pachinko(ds, p.num_clients, p.alpha, p.beta, p.seed)


def client_data(cfg: ExperimentConfig, ds: LabeledDataset, manifest: PartitionManifest) -> list[ClientState]:
    if cfg.partition.sigma_max > 0:
        ds = apply_noise_ladder(manifest, ds, cfg.partition.sigma_max, seed=cfg.partition.seed, unit=cfg.partition.sigma_unit)
    clients = make_clients(ds, manifest)
    dtype = np.dtype(cfg.model.dtype)
    for c in clients:
        if np.issubdtype(c.train_x.dtype, np.floating):
            c.train_x = c.train_x.astype(dtype)
            c.test_x = c.test_x.astype(dtype)
    return clients


def build_simulation(cfg: ExperimentConfig, ds: LabeledDataset, manifest: PartitionManifest):
    """Simulation over the training clients plus the held-out novel clients."""
    clients = client_data(cfg, ds, manifest)
    k = cfg.partition.novel_clients
    train_clients = clients[: len(clients) - k]
    novel = clients[len(clients) - k:]
    sim = Simulation(model_config_for(cfg, ds), cfg.strategy, cfg.train, train_clients)
    return sim, novel


def save_dataset(path, ds: LabeledDataset) -> None:
    arrays = {"inputs": ds.inputs, "labels": ds.labels}
    if ds.coarse_labels is not None:
        arrays["coarse_labels"] = ds.coarse_labels
    if ds.targets is not None:
        arrays["targets"] = ds.targets
    save_arrays(path, arrays, {"num_classes": ds.num_classes, "num_coarse": ds.num_coarse})


def load_dataset(path) -> LabeledDataset:
    arrays, meta = load_arrays(path)
    return LabeledDataset(
        arrays["inputs"],
        arrays["labels"],
        meta["num_classes"],
        arrays.get("coarse_labels"),
        meta.get("num_coarse"),
        arrays.get("targets"),
    )
