"""Datasets, the base/novel class split, episode sampling and augmentation.

Examples are feature vectors rather than images, so augmentation works in
feature space: Gaussian jitter, coordinate masking and a whole-vector sign
flip stand in for colour jitter, cropping and flipping.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation, DataError

__all__ = [
    "LabeledDataset",
    "ClassSplit",
    "Episode",
    "AugmentationConfig",
    "generate_synthetic",
    "sample_episode",
    "augment",
    "augment_batch",
    "load_csv",
    "save_csv",
    "make_rng",
]


def make_rng(*key):
    """Independent generator for an integer key path, e.g. ``(seed, episode)``."""
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_set: tuple = None
    name: str = ""

    def __post_init__(self):
        x = _frozen(self.features, np.float64)
        y = _frozen(self.labels, np.int64)
        if x.ndim != 2:
            raise DataError(f"{self.name or 'dataset'}: features must be 2-D, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise DataError(f"{self.name or 'dataset'}: {x.shape[0]} rows but {y.shape[0]} labels")
        if not np.isfinite(x).all():
            raise DataError(f"{self.name or 'dataset'}: non-finite feature values")
        classes = tuple(sorted(set(y.tolist()))) if self.class_set is None \
            else tuple(int(c) for c in self.class_set)
        if len(set(classes)) != len(classes):
            raise DataError(f"{self.name or 'dataset'}: duplicate ids in class_set")
        stray = set(y.tolist()) - set(classes)
        if stray:
            raise DataError(f"{self.name or 'dataset'}: labels {sorted(stray)} not in class_set")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "class_set", classes)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def local_labels(self):
        """Labels re-indexed to ``0..len(class_set)-1`` in class_set order."""
        lookup = {c: i for i, c in enumerate(self.class_set)}
        return np.array([lookup[c] for c in self.labels.tolist()], dtype=np.int64)

    def subset(self, indices, name=None, class_set=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices],
                              self.class_set if class_set is None else class_set,
                              self.name if name is None else name)

    def equals(self, other):
        return (self.class_set == other.class_set
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.features, other.features))


@dataclass(frozen=True)
class ClassSplit:
    base_classes: frozenset
    novel_classes: frozenset

    def __post_init__(self):
        object.__setattr__(self, "base_classes", frozenset(int(c) for c in self.base_classes))
        object.__setattr__(self, "novel_classes", frozenset(int(c) for c in self.novel_classes))
        self.check()

    def check(self):
        overlap = self.base_classes & self.novel_classes
        if overlap:
            raise ContractViolation(f"base and novel classes overlap: {sorted(overlap)}")


@dataclass(frozen=True, eq=False)
class Episode:
    support: LabeledDataset
    query: LabeledDataset
    way: int
    shot: int
    query_per_class: int
    episode_seed: int
    support_index: np.ndarray = field(repr=False, default=None)
    query_index: np.ndarray = field(repr=False, default=None)

    @property
    def classes(self):
        return self.support.class_set

    def check(self, split=None):
        """Assert the episode protocol; raises ContractViolation on any breach."""
        s, q = self.support, self.query
        if len(s) != self.way * self.shot or len(q) != self.way * self.query_per_class:
            raise ContractViolation(
                f"episode sizes {len(s)}/{len(q)} do not match way={self.way} "
                f"shot={self.shot} query={self.query_per_class}")
        if s.class_set != q.class_set or len(s.class_set) != self.way:
            raise ContractViolation("support and query class sets differ")
        sc = np.bincount(s.local_labels(), minlength=self.way)
        qc = np.bincount(q.local_labels(), minlength=self.way)
        if (sc != self.shot).any() or (qc != self.query_per_class).any():
            raise ContractViolation(f"per-class counts off: support {sc}, query {qc}")
        if self.support_index is not None and self.query_index is not None:
            if np.intersect1d(self.support_index, self.query_index).size:
                raise ContractViolation("support and query share examples")
        if split is not None:
            split.check()
            outside = set(self.classes) - split.novel_classes
            if outside:
                raise ContractViolation(f"episode classes {sorted(outside)} are not novel")


@dataclass(frozen=True)
class AugmentationConfig:
    __pydantic_config__ = {"extra": "forbid"}

    jitter_sigma: float = 0.0
    mask_fraction: float = 0.0
    flip_prob: float = 0.0

    def __post_init__(self):
        if not self.jitter_sigma >= 0:
            raise ConfigError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if not 0 <= self.mask_fraction < 1:
            raise ConfigError(f"mask_fraction must lie in [0, 1), got {self.mask_fraction}")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")

    @property
    def is_identity(self):
        return self.jitter_sigma == 0 and self.mask_fraction == 0 and self.flip_prob == 0


def generate_synthetic(num_base_classes, num_novel_classes, dim, examples_per_class,
                       cluster_spread, seed, *, base_counts=None, novel_shift=0.0):
    """Gaussian-cluster benchmark with disjoint base and novel classes.

    Base classes get ids ``0..B-1`` and novel classes ``B..B+N-1``.  Class means
    are uniform on ``[-1, 1]^dim``; novel means are additionally offset by
    ``novel_shift`` in every coordinate (far-domain setting).  ``base_counts``
    overrides the per-class example count of the base classes.
    """
    for name, v in [("num_base_classes", num_base_classes),
                    ("num_novel_classes", num_novel_classes),
                    ("examples_per_class", examples_per_class)]:
        if int(v) < 1:
            raise ConfigError(f"{name} must be >= 1, got {v}")
    if int(dim) < 2:
        raise ConfigError(f"dim must be >= 2, got {dim}")
    if not cluster_spread > 0:
        raise ConfigError(f"cluster_spread must be > 0, got {cluster_spread}")
    if base_counts is None:
        base_counts = [examples_per_class] * num_base_classes
    if len(base_counts) != num_base_classes or min(base_counts) < 1:
        raise ConfigError("base_counts needs one positive count per base class")

    base_rng, novel_rng = (np.random.default_rng(s)
                           for s in np.random.SeedSequence(int(seed)).spawn(2))

    def clusters(rng, counts, first_id, shift):
        means = rng.uniform(-1.0, 1.0, size=(len(counts), dim)) + shift
        xs, ys = [], []
        for k, (mu, n) in enumerate(zip(means, counts)):
            xs.append(mu + cluster_spread * rng.standard_normal((int(n), dim)))
            ys.append(np.full(int(n), first_id + k))
        return np.concatenate(xs), np.concatenate(ys)

    bx, by = clusters(base_rng, base_counts, 0, 0.0)
    nx, ny = clusters(novel_rng, [examples_per_class] * num_novel_classes,
                      num_base_classes, float(novel_shift))
    base = LabeledDataset(bx, by, range(num_base_classes), "base")
    novel = LabeledDataset(nx, ny,
                           range(num_base_classes, num_base_classes + num_novel_classes), "novel")
    return base, novel, ClassSplit(base.class_set, novel.class_set)


def sample_episode(novel, way, shot, query_per_class, seed, split=None):
    """Draw one way-shot episode; classes and examples without replacement."""
    if way < 1 or shot < 1 or query_per_class < 1:
        raise ConfigError("way, shot and query_per_class must all be >= 1")
    if way > len(novel.class_set):
        raise DataError(f"way={way} exceeds the {len(novel.class_set)} available classes")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    classes = rng.choice(np.array(novel.class_set), size=way, replace=False)
    support_idx, query_idx = [], []
    for c in classes:
        pool = np.flatnonzero(novel.labels == c)
        need = shot + query_per_class
        if pool.size < need:
            raise DataError(f"class {c} has {pool.size} examples, episode needs {need}")
        picked = rng.choice(pool, size=need, replace=False)
        support_idx.append(picked[:shot])
        query_idx.append(picked[shot:])
    classes = tuple(sorted(int(c) for c in classes))
    s_idx, q_idx = np.concatenate(support_idx), np.concatenate(query_idx)
    episode = Episode(
        support=novel.subset(s_idx, "support", classes),
        query=novel.subset(q_idx, "query", classes),
        way=way, shot=shot, query_per_class=query_per_class, episode_seed=int(seed),
        support_index=s_idx, query_index=q_idx)
    episode.check(split)
    return episode


def augment_batch(x, cfg, rng):
    """Augment every row of ``x`` independently; see :func:`augment`."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.is_identity:
        return x.copy()
    n, d = x.shape
    out = x + cfg.jitter_sigma * rng.standard_normal((n, d)) if cfg.jitter_sigma else x.copy()
    n_mask = math.floor(cfg.mask_fraction * d)
    if n_mask:
        drop = np.argsort(rng.random((n, d)), axis=1)[:, :n_mask]
        np.put_along_axis(out, drop, 0.0, axis=1)
    if cfg.flip_prob:
        flip = rng.random(n) < cfg.flip_prob
        out[flip] *= -1.0
    return out


def augment(x, cfg, rng):
    """One augmented view: ``(x + noise) * mask * sign``."""
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], cfg, rng)[0]


def save_csv(ds, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for label, row in zip(ds.labels.tolist(), ds.features.tolist()):
            writer.writerow([label, *(repr(v) for v in row)])


def load_csv(path, name=None):
    """Read ``label,f1,...,fd`` rows (no header)."""
    labels, rows, width = [], [], None
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, fields in enumerate(csv.reader(fh), start=1):
            if not fields:
                continue
            if width is None:
                width = len(fields)
                if width < 2:
                    raise DataError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(fields) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
            try:
                labels.append(int(fields[0]))
                rows.append([float(v) for v in fields[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    return LabeledDataset(np.array(rows), np.array(labels), None, name or str(path))
