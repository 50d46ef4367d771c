"""Datasets: CIFAR binary readers and small synthetic stand-ins."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
CIFAR_PIXELS = 3072
RECORDS_PER_BATCH = 10000

CIFAR_FILES = {
    "cifar10": (
        [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"],
        CIFAR10_RECORD,
    ),
    "cifar100": (["train.bin", "test.bin"], CIFAR100_RECORD),
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    """Inputs with per-sample class labels.

    ``labels`` drive partitioning and, for image tasks, are the targets.
    Sequence tasks carry per-position ``targets`` (next token) and use
    ``labels`` for the sample's style.
    """

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    coarse_labels: np.ndarray | None = None
    num_coarse: int | None = None
    targets: np.ndarray | None = None

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise DatasetFormatError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")
        if self.coarse_labels is not None:
            if self.num_coarse is None:
                raise DatasetFormatError("coarse labels given without num_coarse")
            if self.coarse_labels.min() < 0 or self.coarse_labels.max() >= self.num_coarse:
                raise DatasetFormatError(f"coarse labels outside [0, {self.num_coarse})")

    def __len__(self) -> int:
        return len(self.labels)

    def targets_for(self, idx: np.ndarray) -> np.ndarray:
        return (self.targets if self.targets is not None else self.labels)[idx]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.inputs, self.labels, self.coarse_labels, self.targets):
            if arr is not None:
                a = np.ascontiguousarray(arr)
                h.update(str((a.dtype.str, a.shape)).encode())
                h.update(a.tobytes())
        return h.hexdigest()[:16]


def read_cifar_file(path: str | os.PathLike, record_size: int, expected_records: int | None = None) -> np.ndarray:
    """Raw ``uint8`` records of one CIFAR binary file, shape ``n x record_size``."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CIFAR file not found: {path}")
    actual = path.stat().st_size
    if expected_records is not None:
        expected = expected_records * record_size
        if actual != expected:
            raise DatasetFormatError(f"{path}: expected {expected} bytes, found {actual}")
    elif actual == 0 or actual % record_size:
        raise DatasetFormatError(
            f"{path}: size {actual} bytes is not a positive multiple of the {record_size}-byte record"
        )
    raw = np.fromfile(path, dtype=np.uint8)
    return raw.reshape(-1, record_size)


def load_cifar(path: str | os.PathLike, variant: str = "cifar10", strict: bool = True) -> LabeledDataset:
    """Load and pool the train and test files of a CIFAR binary distribution.

    With ``strict`` every file must hold the standard record count (10000 per
    CIFAR-10 batch, 50000/10000 for CIFAR-100 train/test); otherwise any whole
    number of records is accepted. Nothing is returned unless every file
    validates.
    """
    if variant not in CIFAR_FILES:
        raise ValueError(f"unknown CIFAR variant {variant!r}")
    names, record = CIFAR_FILES[variant]
    chunks = []
    for name in names:
        expected = None
        if strict:
            expected = 5 * RECORDS_PER_BATCH if name == "train.bin" else RECORDS_PER_BATCH
        chunks.append(read_cifar_file(Path(path) / name, record, expected))
    raw = np.concatenate(chunks)
    pixels = raw[:, record - CIFAR_PIXELS:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    if variant == "cifar10":
        labels = raw[:, 0].astype(np.int64)
        if labels.max() >= 10:
            raise DatasetFormatError(f"CIFAR-10 label {labels.max()} out of range")
        return LabeledDataset(pixels, labels, 10)
    coarse = raw[:, 0].astype(np.int64)
    fine = raw[:, 1].astype(np.int64)
    if coarse.max() >= 20 or fine.max() >= 100:
        raise DatasetFormatError("CIFAR-100 label out of range")
    return LabeledDataset(pixels, fine, 100, coarse_labels=coarse, num_coarse=20)


def synth_image_task(
    num_classes: int = 10,
    per_class: int = 50,
    extent: int = 16,
    seed: int = 0,
    channels: int = 3,
    noise: float = 0.25,
) -> LabeledDataset:
    """Oriented sinusoidal gratings, one orientation/frequency pair per class.

    Each sample gets a random phase, a small orientation jitter, random
    per-channel gains and additive Gaussian noise, then is clipped to [0, 1].
    Neighbouring classes have nearby orientations, so telling all classes
    apart is harder than separating a random pair.
    """
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    angle = np.pi * labels / num_classes + rng.normal(0.0, 0.04, n)
    freq = np.where(labels % 2 == 0, 2.0, 3.0) + rng.uniform(-0.25, 0.25, n)
    phase = rng.uniform(0.0, 2 * np.pi, n)
    coords = (np.arange(extent) + 0.5) / extent
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    proj = np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    gains = rng.uniform(0.5, 1.0, (n, channels))
    img = 0.5 + 0.4 * gains[:, :, None, None] * wave[:, None]
    img = img + rng.normal(0.0, noise, img.shape)
    return LabeledDataset(np.clip(img, 0.0, 1.0), labels, num_classes)


def style_transitions(vocab: int, num_styles: int, seed: int, concentration: float = 0.3) -> np.ndarray:
    """One row-stochastic ``vocab x vocab`` transition matrix per style."""
    if vocab < 2:
        raise ValueError("vocab must be >= 2")
    rng = np.random.default_rng(seed)
    return rng.dirichlet(np.full(vocab, concentration), size=(num_styles, vocab))


def synth_char_task(
    vocab: int = 16,
    seq_len: int = 32,
    num_styles: int = 4,
    per_style: int = 100,
    seed: int = 0,
) -> LabeledDataset:
    """Character sequences from per-style Markov chains.

    ``inputs`` are ``seq_len`` tokens, ``targets`` the same sequence shifted by
    one (next character), ``labels`` the style id.
    """
    trans = style_transitions(vocab, num_styles, seed)
    rng = np.random.default_rng([seed, 1])
    n = num_styles * per_style
    styles = np.repeat(np.arange(num_styles), per_style)
    seqs = np.empty((n, seq_len + 1), dtype=np.int64)
    seqs[:, 0] = rng.integers(0, vocab, n)
    cdf = np.cumsum(trans, axis=2)
    for t in range(seq_len):
        u = rng.random(n)
        rows = cdf[styles, seqs[:, t]]
        seqs[:, t + 1] = np.minimum((rows < u[:, None]).sum(axis=1), vocab - 1)
    return LabeledDataset(seqs[:, :-1].copy(), styles, num_styles, targets=seqs[:, 1:].copy())
