"""Three-class 2D toy domains with covariate shift, plus batch sampling.

The in-distribution domain is three Gaussian blobs; the out-of-distribution
domain is the same blob process pushed through a rigid transform (rotation
about the origin, then translation), so both domains share the label space.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_matrix

__all__ = [
    "LabeledSet",
    "DomainPair",
    "ToySpec",
    "make_toy_domains",
    "mixed_batch",
    "noise_batch",
    "export_labeled_set",
]

DEFAULT_CENTERS = ((0.0, 2.0), (-2.0, -1.0), (2.0, -1.0))


@dataclass
class LabeledSet:
    points: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) class indices

    def __post_init__(self):
        self.points = as_matrix(self.points)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.points.shape[0]:
            raise ValueError("one label per point required")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class DomainPair:
    id_train: LabeledSet
    id_test: LabeledSet
    ood_train: LabeledSet
    ood_test: LabeledSet
    ood_class_label: int = 0
    bounding_box: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


@dataclass
class ToySpec:
    """Blob layout for the toy task. ``translation``/``rotation`` define the
    rigid transform producing the shifted domain."""

    centers: tuple = DEFAULT_CENTERS
    std: float = 0.45
    translation: tuple[float, float] = (4.5, 4.5)
    rotation: float = 0.0
    train_per_class: int = 300
    test_per_class: int = 300
    seed: int = 0
    y_ood: int = 0

    def __post_init__(self):
        if self.std <= 0:
            raise ValueError("std must be positive")
        if self.train_per_class <= 0 or self.test_per_class <= 0:
            raise ValueError("sample counts must be positive")
        centers = np.asarray(self.centers, dtype=np.float64)
        if len(centers) != len({tuple(c) for c in centers.tolist()}):
            raise ValueError("blob centers must be distinct")


def _sample_blobs(centers, std, per_class, rng) -> LabeledSet:
    points, labels = [], []
    for c, center in enumerate(centers):
        points.append(center + std * rng.standard_normal((per_class, 2)))
        labels.append(np.full(per_class, c, dtype=np.int64))
    return LabeledSet(np.vstack(points), np.concatenate(labels))


def _rigid_transform(points, rotation, translation) -> np.ndarray:
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return points @ rot.T + np.asarray(translation, dtype=np.float64)


def make_toy_domains(spec: ToySpec) -> DomainPair:
    """Deterministically sample the four splits for a :class:`ToySpec`."""
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers, dtype=np.float64)
    id_train = _sample_blobs(centers, spec.std, spec.train_per_class, rng)
    id_test = _sample_blobs(centers, spec.std, spec.test_per_class, rng)
    ood_train_raw = _sample_blobs(centers, spec.std, spec.train_per_class, rng)
    ood_test_raw = _sample_blobs(centers, spec.std, spec.test_per_class, rng)
    ood_train = LabeledSet(
        _rigid_transform(ood_train_raw.points, spec.rotation, spec.translation),
        ood_train_raw.labels,
    )
    ood_test = LabeledSet(
        _rigid_transform(ood_test_raw.points, spec.rotation, spec.translation),
        ood_test_raw.labels,
    )
    all_points = np.vstack(
        [id_train.points, id_test.points, ood_train.points, ood_test.points]
    )
    bbox = (
        float(all_points[:, 0].min()),
        float(all_points[:, 1].min()),
        float(all_points[:, 0].max()),
        float(all_points[:, 1].max()),
    )
    n_classes = len(centers)
    if not 0 <= spec.y_ood < n_classes:
        raise ValueError("y_ood out of label range")
    return DomainPair(
        id_train=id_train,
        id_test=id_test,
        ood_train=ood_train,
        ood_test=ood_test,
        ood_class_label=spec.y_ood,
        bounding_box=bbox,
    )


def mixed_batch(pair: DomainPair, batch_size: int, rng: np.random.Generator):
    """Sample one half-batch from each training split, without replacement.

    Returns (id_half, ood_half); the i-th rows of the halves are the pairing
    used by the paired divergence losses.
    """
    if batch_size % 2 != 0:
        raise ValueError("batch size must be even")
    half = batch_size // 2
    if half > len(pair.id_train) or half > len(pair.ood_train):
        raise ValueError("batch size exceeds a training split")
    idx_id = rng.choice(len(pair.id_train), size=half, replace=False)
    idx_ood = rng.choice(len(pair.ood_train), size=half, replace=False)
    id_half = LabeledSet(pair.id_train.points[idx_id], pair.id_train.labels[idx_id])
    ood_half = LabeledSet(
        pair.ood_train.points[idx_ood], pair.ood_train.labels[idx_ood]
    )
    return id_half, ood_half


def noise_batch(batch_size: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. standard normal noise matrix of shape (batch_size, dim)."""
    if batch_size <= 0 or dim <= 0:
        raise ValueError("batch size and dim must be positive")
    return rng.standard_normal((batch_size, dim))


def export_labeled_set(labeled: LabeledSet, path):
    """Write a labeled set as ``x,y,label`` CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "label"])
        for (x, y), lab in zip(labeled.points, labeled.labels):
            writer.writerow([f"{x:.12g}", f"{y:.12g}", int(lab)])
