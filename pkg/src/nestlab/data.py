"""Synthetic long-tailed classification data.

Training counts follow the exponential profile ``n_max * IF**(-j / (C - 1))``;
test sets are balanced. Class means are random directions rescaled so the
closest pair sits exactly ``cluster_separation`` apart. All generation draws
from numpy's counter-based Philox bit generator, seeded per purpose through
``SeedSequence.spawn``; augmentation uses :mod:`nestlab.rng`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import rng
from .errors import ConfigError


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int = 20
    n_max: int = 500
    imbalance_factor: float = 100.0
    feature_dim: int = 16
    cluster_separation: float = 3.0
    noise_sigma: float = 1.0
    seed: int = 0
    test_per_class: int = 50

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2", "num_classes")
        if self.n_max < 1:
            raise ConfigError("n_max must be >= 1", "n_max")
        if self.imbalance_factor < 1:
            raise ConfigError("imbalance_factor must be >= 1", "imbalance_factor")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1", "feature_dim")
        if self.cluster_separation <= 0:
            raise ConfigError("cluster_separation must be > 0", "cluster_separation")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", "noise_sigma")
        if self.test_per_class < 1:
            raise ConfigError("test_per_class must be >= 1", "test_per_class")


@dataclass(frozen=True)
class ClassPrior:
    """Per-class training counts ``n_j``."""

    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) < 1 or min(self.counts) < 1:
            raise ConfigError("class counts must all be >= 1", "counts")

    @property
    def num_classes(self) -> int:
        return len(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.float64)

    def log_counts(self) -> np.ndarray:
        return np.log(self.as_array())


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    uid: int = 0


@dataclass(frozen=True)
class AugmentationPolicy:
    """Label-preserving views: additive Gaussian noise plus coordinate dropout.

    Draw 0 is always the untouched sample, so ``copies=1`` trains on originals.
    """

    noise_sigma: float = 0.5
    mask_prob: float = 0.1
    copies: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0", "noise_sigma")
        if not 0.0 <= self.mask_prob < 1.0:
            raise ConfigError("mask_prob must lie in [0, 1)", "mask_prob")
        if self.copies < 1:
            raise ConfigError("copies must be >= 1", "copies")


@dataclass
class Dataset:
    """Column-oriented sample store; indexing yields :class:`Sample`."""

    features: np.ndarray
    labels: np.ndarray
    uids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.uids is None:
            self.uids = np.arange(len(self.labels), dtype=np.int64)
        else:
            self.uids = np.asarray(self.uids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.features[i].copy(), int(self.labels[i]), int(self.uids[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def class_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


def build_longtail_counts(spec: LongTailSpec) -> ClassPrior:
    C = spec.num_classes
    counts = [
        max(1, int(_round_half_up(spec.n_max * spec.imbalance_factor ** (-j / (C - 1)))))
        for j in range(C)
    ]
    return ClassPrior(tuple(counts))


def _round_half_up(x: float) -> int:
    # Python's round() is banker's rounding; the profile wants conventional rounding
    return math.floor(x + 0.5)


def class_means(spec: LongTailSpec) -> np.ndarray:
    means_seq = np.random.SeedSequence(spec.seed).spawn(3)[0]
    gen = np.random.Generator(np.random.Philox(means_seq))
    raw = gen.standard_normal((spec.num_classes, spec.feature_dim))
    diffs = raw[:, None, :] - raw[None, :, :]
    dist = np.sqrt((diffs**2).sum(-1))
    closest = dist[np.triu_indices(spec.num_classes, k=1)].min()
    return raw * (spec.cluster_separation / closest)


def generate_dataset(spec: LongTailSpec, prior: ClassPrior | None = None) -> tuple[Dataset, Dataset]:
    """Draw ``(train, test)``; train follows ``prior`` and test is balanced."""
    if prior is None:
        prior = build_longtail_counts(spec)
    if prior.num_classes != spec.num_classes:
        raise ConfigError("prior length does not match num_classes", "counts")
    means = class_means(spec)
    _, train_seq, test_seq = np.random.SeedSequence(spec.seed).spawn(3)

    def draw(seq, per_class) -> Dataset:
        gen = np.random.Generator(np.random.Philox(seq))
        feats, labels = [], []
        for j, n in enumerate(per_class):
            feats.append(means[j] + spec.noise_sigma * gen.standard_normal((n, spec.feature_dim)))
            labels.append(np.full(n, j, dtype=np.int64))
        return Dataset(np.concatenate(feats), np.concatenate(labels))

    train = draw(train_seq, prior.counts)
    test = draw(test_seq, [spec.test_per_class] * spec.num_classes)
    return train, test


def augment_features(
    features: np.ndarray,
    uids: np.ndarray,
    policy: AugmentationPolicy,
    draw: int,
    epoch: int = 0,
) -> np.ndarray:
    """Vectorized augmentation of a ``(B, d)`` block of samples.

    The view is a pure function of ``(policy.seed, epoch, uid, draw)``.
    """
    features = np.asarray(features, dtype=np.float64)
    if draw == 0 or (policy.noise_sigma == 0 and policy.mask_prob == 0):
        return features.copy()
    uids = np.asarray(uids, dtype=np.int64)[:, None]
    coords = np.arange(features.shape[1], dtype=np.int64)[None, :]
    out = features + policy.noise_sigma * rng.normal(policy.seed, epoch, draw, 0, uids, coords)
    if policy.mask_prob > 0:
        keep = rng.uniform(policy.seed, epoch, draw, 1, uids, coords) >= policy.mask_prob
        out = out * keep
    return out


def augment(x: Sample, policy: AugmentationPolicy, draw: int, epoch: int = 0) -> Sample:
    if not 0 <= draw < policy.copies:
        raise ConfigError(f"draw must lie in [0, {policy.copies})", "draw")
    feats = augment_features(x.features[None, :], np.array([x.uid]), policy, draw, epoch)[0]
    return Sample(feats, x.label, x.uid)


def split_categories(
    prior: ClassPrior, many_threshold: int = 100, few_threshold: int = 20
) -> tuple[set[int], set[int], set[int]]:
    """Partition classes into (many, medium, few) by training count."""
    if not many_threshold > few_threshold > 0:
        raise ConfigError("need many_threshold > few_threshold > 0", "many_threshold")
    many, medium, few = set(), set(), set()
    for j, n in enumerate(prior.counts):
        if n > many_threshold:
            many.add(j)
        elif n < few_threshold:
            few.add(j)
        else:
            medium.add(j)
    return many, medium, few


# --------------------------------------------------------------- JSON files


def _rows(ds: Dataset) -> list:
    return [[row.tolist(), int(label)] for row, label in zip(ds.features, ds.labels)]


def _from_rows(rows: list) -> Dataset:
    if not rows:
        return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64))
    return Dataset(np.array([r[0] for r in rows], dtype=np.float64), np.array([r[1] for r in rows]))


def save_dataset(path: str | Path, spec: LongTailSpec, prior: ClassPrior, train: Dataset, test: Dataset) -> None:
    payload = {
        "spec": asdict(spec),
        "counts": list(prior.counts),
        "train": _rows(train),
        "test": _rows(test),
    }
    Path(path).write_text(json.dumps(payload))


def load_dataset(path: str | Path) -> tuple[LongTailSpec, ClassPrior, Dataset, Dataset]:
    payload = json.loads(Path(path).read_text())
    spec = LongTailSpec(**payload["spec"])
    prior = ClassPrior(tuple(payload["counts"]))
    return spec, prior, _from_rows(payload["train"]), _from_rows(payload["test"])
