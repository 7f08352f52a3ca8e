"""Dataset ingestion and evaluation-set sampling.

Two sources: the CIFAR-10 binary layout (3073-byte records, channel-planar
RGB) and a procedural synthetic dataset with one distinctive shape per
class, used for fast desk-scale experiments.  Pixels live in [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .util import rng_for

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


class DataError(ValueError):
    """Malformed dataset file or invalid sampling request."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64 in [0, class_count)
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, n: int, seed: int) -> "Dataset":
        """Class-balanced random subset of n images."""
        if n >= len(self):
            return self
        rng = rng_for(seed, 0xD5)
        per = n // self.class_count
        picks = []
        for k in range(self.class_count):
            idx = np.flatnonzero(self.labels == k)
            take = min(per, idx.size)
            picks.append(rng.choice(idx, size=take, replace=False))
        picks = np.sort(np.concatenate(picks))
        return Dataset(self.images[picks], self.labels[picks], self.class_count, self.split)


@dataclass(frozen=True)
class EvalItem:
    index: int  # position in the originating dataset
    image: np.ndarray
    true_label: int
    target_label: int


@dataclass(frozen=True)
class EvalSet:
    """Attack tasks: one image per sampled class, targets a derangement."""

    items: Tuple[EvalItem, ...]
    seed: int
    split: str

    def images(self) -> np.ndarray:
        return np.stack([it.image for it in self.items])

    def true_labels(self) -> np.ndarray:
        return np.array([it.true_label for it in self.items], dtype=np.int64)

    def target_labels(self) -> np.ndarray:
        return np.array([it.target_label for it in self.items], dtype=np.int64)


@dataclass(frozen=True)
class RepresentationEvalSet:
    """Representation-matching tasks: target images x, initial images y0."""

    target_indices: Tuple[int, ...]
    initial_indices: Tuple[int, ...]
    targets: np.ndarray  # (T, C, H, W)
    initials: np.ndarray  # (I, C, H, W)
    seed: int

    @property
    def task_count(self) -> int:
        return len(self.target_indices) * len(self.initial_indices)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------------


def load_cifar10_binary(path, split: str = "train") -> Dataset:
    """Load one CIFAR-10 binary batch file.

    Record layout: 1 label byte then 3072 pixel bytes (all red, all green,
    all blue, each row-major 32x32).  Pixels are scaled by 1/255.
    """
    blob = Path(path).read_bytes()
    if len(blob) == 0 or len(blob) % CIFAR_RECORD_BYTES != 0:
        raise DataError(
            f"{path}: size {len(blob)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise DataError(f"{path}: record {bad[0]} has label byte {labels[bad[0]]} >= 10")
    images = raw[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, 10, split)


def save_cifar10_binary(dataset: Dataset, path) -> None:
    """Export a 10-class 32x32 dataset in the CIFAR-10 binary layout."""
    if dataset.image_shape != (3, 32, 32) or dataset.class_count != 10:
        raise DataError(
            f"CIFAR layout needs 10 classes of 3x32x32 images, got "
            f"{dataset.class_count} classes of {dataset.image_shape}"
        )
    pixels = np.clip(np.rint(dataset.images * 255.0), 0, 255).astype(np.uint8)
    records = np.concatenate(
        [dataset.labels.astype(np.uint8)[:, None], pixels.reshape(len(dataset), -1)], axis=1
    )
    Path(path).write_bytes(records.tobytes())


# ---------------------------------------------------------------------------
# synthetic dataset: one distinctive shape per class
# ---------------------------------------------------------------------------


def _class_mask(shape_id: int, u: np.ndarray, v: np.ndarray, freq: float) -> np.ndarray:
    box = (np.abs(u) < 0.85) & (np.abs(v) < 0.85)
    if shape_id == 0:  # filled disk
        return u * u + v * v < 0.55**2
    if shape_id == 1:  # square outline
        m = np.maximum(np.abs(u), np.abs(v))
        return (m > 0.35) & (m < 0.62)
    if shape_id == 2:  # horizontal stripes
        return (np.sin(freq * math.pi * v) > 0) & box
    if shape_id == 3:  # vertical stripes
        return (np.sin(freq * math.pi * u) > 0) & box
    if shape_id == 4:  # diagonal cross
        return (np.abs(np.abs(u) - np.abs(v)) < 0.16) & box
    if shape_id == 5:  # plus sign
        return ((np.abs(u) < 0.16) | (np.abs(v) < 0.16)) & (np.maximum(np.abs(u), np.abs(v)) < 0.7)
    if shape_id == 6:  # filled triangle, apex up
        return (v > -0.55) & (v < 0.55) & (np.abs(u) < (0.55 - v) * 0.75)
    if shape_id == 7:  # checkerboard
        return (np.sin(freq * math.pi * u) * np.sin(freq * math.pi * v) > 0) & box
    if shape_id == 8:  # annulus
        r2 = u * u + v * v
        return (r2 > 0.3**2) & (r2 < 0.62**2)
    # diagonal stripes
    return (np.sin(freq * math.pi * (u + v) / math.sqrt(2.0)) > 0) & box


def _render(shape_id: int, freq: float, size: int, rng: np.random.Generator) -> np.ndarray:
    cy, cx = rng.uniform(-0.18, 0.18, 2)
    scl = rng.uniform(0.85, 1.15)
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(coords, coords, indexing="ij")
    mask = _class_mask(shape_id, (u - cx) / scl, (v - cy) / scl, freq).astype(np.float32)
    while True:  # foreground and background must stay distinguishable
        fg = rng.uniform(0.05, 0.95, 3).astype(np.float32)
        bg = rng.uniform(0.05, 0.95, 3).astype(np.float32)
        if abs(float(fg.mean() - bg.mean())) >= 0.35:
            break
    img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
    img += rng.normal(0.0, 0.05, img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(
    class_count: int, per_class: int, image_size: int = 32, seed: int = 0, split: str = "train"
) -> Dataset:
    """Procedural shape dataset, deterministic per (seed, split)."""
    if class_count < 2:
        raise DataError(f"need at least 2 classes, got {class_count}")
    split_code = {"train": 0, "test": 1}.get(split, 2)
    images = np.empty((class_count * per_class, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(class_count * per_class, dtype=np.int64)
    i = 0
    for k in range(class_count):
        shape_id = k % 10
        freq = 3.0 + 1.5 * (k // 10)
        for j in range(per_class):
            rng = rng_for(seed, split_code, k, j)
            images[i] = _render(shape_id, freq, image_size, rng)
            labels[i] = k
            i += 1
    return Dataset(images, labels, class_count, split)


# ---------------------------------------------------------------------------
# evaluation-set sampling
# ---------------------------------------------------------------------------


def _derangement(classes: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # rejection sampling keeps the distribution uniform over derangements
    while True:
        perm = rng.permutation(classes)
        if not np.any(perm == classes):
            return perm


def sample_eval_set(dataset: Dataset, n: int, seed: int) -> EvalSet:
    """One image per sampled class; target labels form a derangement."""
    if n > dataset.class_count:
        raise DataError(f"cannot sample {n} distinct classes from {dataset.class_count}")
    if n < 2:
        raise DataError("need at least 2 classes for a fixed-point-free assignment")
    rng = rng_for(seed, 0xE7A1)
    classes = np.sort(rng.choice(dataset.class_count, size=n, replace=False))
    indices = []
    for k in classes:
        pool = np.flatnonzero(dataset.labels == k)
        if pool.size == 0:
            raise DataError(f"dataset has no images of class {k}")
        indices.append(int(rng.choice(pool)))
    targets = _derangement(classes, rng)
    items = tuple(
        EvalItem(idx, dataset.images[idx], int(cls), int(tgt))
        for idx, cls, tgt in zip(indices, classes, targets)
    )
    return EvalSet(items, seed, dataset.split)


def sample_representation_eval(
    dataset: Dataset, n_targets: int, n_initials: int, seed: int
) -> RepresentationEvalSet:
    """Target images from distinct classes plus class-balanced initial images.

    Targets and initials are disjoint.  With few classes the pairwise
    distinct-class requirement is relaxed to distinct images.
    """
    if n_targets > dataset.class_count:
        raise DataError(f"cannot draw {n_targets} target classes from {dataset.class_count}")
    if n_targets + n_initials > len(dataset):
        raise DataError(
            f"need {n_targets + n_initials} distinct images, dataset has {len(dataset)}"
        )
    rng = rng_for(seed, 0xE7A2)
    target_classes = np.sort(rng.choice(dataset.class_count, size=n_targets, replace=False))
    used: List[int] = []
    for k in target_classes:
        pool = np.flatnonzero(dataset.labels == k)
        if pool.size == 0:
            raise DataError(f"dataset has no images of class {k}")
        used.append(int(rng.choice(pool)))
    taken = set(used)
    initials: List[int] = []
    k = 0
    guard = 0
    while len(initials) < n_initials:
        pool = np.flatnonzero(dataset.labels == (k % dataset.class_count))
        pool = pool[~np.isin(pool, list(taken))]
        if pool.size:
            pick = int(rng.choice(pool))
            initials.append(pick)
            taken.add(pick)
        k += 1
        guard += 1
        if guard > dataset.class_count * (n_initials + 1):
            raise DataError("insufficient distinct images for initial set")
    return RepresentationEvalSet(
        tuple(used),
        tuple(initials),
        dataset.images[np.array(used)],
        dataset.images[np.array(initials)],
        seed,
    )
