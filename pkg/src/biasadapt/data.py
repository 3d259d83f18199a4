"""Imbalanced dataset construction: count recipes, synthetic Gaussian mixtures,
labeled/unlabeled splits, class-balanced batches, CSV round-trip."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import ensure_finite

UNLABELED = -1

PROFILE_KINDS = ("longtail", "step", "reversed_longtail", "uniform")


@dataclass(frozen=True)
class ImbalanceProfile:
    """Per-class count recipe. gamma is the max/min count ratio, n1 the
    largest class count, num_classes the number of classes."""

    kind: str
    gamma: float
    n1: int
    num_classes: int

    def __post_init__(self):
        if self.kind not in PROFILE_KINDS:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        if self.gamma < 1.0:
            raise ValueError(f"gamma must be >= 1, got {self.gamma}")
        if self.n1 < 1:
            raise ValueError(f"n1 must be >= 1, got {self.n1}")
        if self.num_classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.num_classes}")


def class_counts(profile: ImbalanceProfile) -> np.ndarray:
    """Per-class sample counts, length num_classes, every entry >= 1.

    longtail decays geometrically from n1 at class 0 down to n1/gamma at the
    last class; reversed_longtail is that sequence reversed; step gives the
    first ceil(K/2) classes n1 and the rest n1/gamma; uniform gives n1 to all.
    Fractional counts are floored (with a 1e-9 guard so exact ratios like
    1500/100 stay exact in floating point) and clamped at 1.
    """
    k = profile.num_classes
    g = profile.gamma
    n1 = profile.n1
    if profile.kind == "uniform":
        return np.full(k, n1, dtype=np.int64)
    if profile.kind == "step":
        head = math.ceil(k / 2)
        tail_count = max(1, math.floor(n1 / g + 1e-9))
        return np.array([n1] * head + [tail_count] * (k - head), dtype=np.int64)
    decay = np.array(
        [max(1, math.floor(n1 * g ** (-i / (k - 1)) + 1e-9)) for i in range(k)],
        dtype=np.int64,
    )
    if profile.kind == "reversed_longtail":
        return decay[::-1].copy()
    return decay


@dataclass
class Dataset:
    """Feature matrix with observed labels (-1 = unlabeled) and hidden
    ground-truth labels kept only for diagnostics."""

    features: np.ndarray
    labels: np.ndarray
    true_labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be 2-D")
        ensure_finite("features", self.features)
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.true_labels.shape != (n,):
            raise ValueError("labels and true_labels must have one entry per row")
        k = self.num_classes
        if np.any((self.labels < UNLABELED) | (self.labels >= k)):
            raise ValueError(f"labels must lie in {{-1, 0..{k - 1}}}")
        if np.any((self.true_labels < 0) | (self.true_labels >= k)):
            raise ValueError(f"true_labels must lie in {{0..{k - 1}}}")
        observed = self.labels >= 0
        if np.any(self.labels[observed] != self.true_labels[observed]):
            raise ValueError("labeled rows must have labels == true_labels")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def per_class_counts(self) -> np.ndarray:
        return np.bincount(self.true_labels, minlength=self.num_classes)


def class_means_on_sphere(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """K unit vectors from the rng stream; orthonormalized (modified
    Gram-Schmidt) when K <= dim so the spread is exact."""
    raw = rng.standard_normal((num_classes, dim))
    if num_classes <= dim:
        basis = np.empty_like(raw)
        for i in range(num_classes):
            v = raw[i].copy()
            for j in range(i):
                v -= (v @ basis[j]) * basis[j]
            basis[i] = v / np.linalg.norm(v)
        return basis
    return raw / np.linalg.norm(raw, axis=1, keepdims=True)


def synth_gaussian_mixture(
    num_classes: int,
    dim: int,
    class_separation: float,
    counts,
    rng: np.random.Generator,
) -> Dataset:
    """Fully-labeled mixture dataset: class k gets counts[k] rows drawn from an
    isotropic unit-variance Gaussian at class_separation * (unit direction k)."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (num_classes,):
        raise ValueError(f"counts must have length {num_classes}")
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if class_separation < 0:
        raise ValueError("class_separation must be >= 0")
    means = class_separation * class_means_on_sphere(num_classes, dim, rng)
    rows = []
    labels = []
    for k in range(num_classes):
        rows.append(means[k] + rng.standard_normal((int(counts[k]), dim)))
        labels.append(np.full(int(counts[k]), k, dtype=np.int64))
    features = np.vstack(rows)
    y = np.concatenate(labels)
    return Dataset(features, y.copy(), y, num_classes)


def _per_class_permutations(full: Dataset, rng: np.random.Generator) -> list[np.ndarray]:
    return [
        rng.permutation(np.flatnonzero(full.true_labels == k))
        for k in range(full.num_classes)
    ]


def _subset(full: Dataset, idx: np.ndarray, labeled: bool) -> Dataset:
    truth = full.true_labels[idx]
    labels = truth.copy() if labeled else np.full(idx.size, UNLABELED, dtype=np.int64)
    return Dataset(full.features[idx].copy(), labels, truth.copy(), full.num_classes)


def split_counts(full: Dataset, parts, labeled_flags, rng: np.random.Generator) -> list[Dataset]:
    """Partition a fully-labeled dataset into disjoint per-class subsets.

    parts is a sequence of per-class count arrays (one per output dataset);
    labeled_flags says which outputs keep their labels. Raises naming the
    class when a class has too few rows to cover all parts.
    """
    parts = [np.asarray(p, dtype=np.int64) for p in parts]
    perms = _per_class_permutations(full, rng)
    need = np.sum(parts, axis=0)
    for k in range(full.num_classes):
        if need[k] > perms[k].size:
            raise ValueError(
                f"class {k} has {perms[k].size} rows, need {int(need[k])}"
            )
    outputs = []
    offsets = np.zeros(full.num_classes, dtype=np.int64)
    for counts, labeled in zip(parts, labeled_flags):
        take = []
        for k in range(full.num_classes):
            c = int(counts[k])
            take.append(perms[k][offsets[k] : offsets[k] + c])
            offsets[k] += c
        idx = np.concatenate(take)
        outputs.append(_subset(full, idx, labeled))
    return outputs


def split_labeled_unlabeled(
    full: Dataset,
    labeled_counts,
    unlabeled_counts,
    rng: np.random.Generator,
) -> tuple[Dataset, Dataset]:
    """Disjoint (labeled, unlabeled) split; unlabeled rows get label -1 but
    keep true_labels for diagnostics."""
    d_l, d_u = split_counts(full, [labeled_counts, unlabeled_counts], [True, False], rng)
    return d_l, d_u


@dataclass(frozen=True)
class BalancedBatchSpec:
    """Exactly batch_size / num_classes draws per class."""

    batch_size: int
    num_classes: int
    per_class: int = field(init=False)

    def __post_init__(self):
        if self.batch_size % self.num_classes != 0:
            raise ValueError(
                f"batch size {self.batch_size} not divisible by {self.num_classes} classes"
            )
        object.__setattr__(self, "per_class", self.batch_size // self.num_classes)


def balanced_batch(dataset: Dataset, spec: BalancedBatchSpec, rng: np.random.Generator) -> np.ndarray:
    """Exactly stratified class-aware sample: per_class indices per class,
    drawn with replacement within each class."""
    idx = []
    for k in range(spec.num_classes):
        rows = np.flatnonzero(dataset.labels == k)
        if rows.size == 0:
            raise ValueError(f"class {k} has no labeled rows")
        idx.append(rows[rng.integers(0, rows.size, size=spec.per_class)])
    return np.concatenate(idx)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def save_csv_dataset(dataset: Dataset, path) -> None:
    """CSV with columns f0..f{d-1}, label, true_label; floats carry 17
    significant digits so save -> load is bit-exact."""
    path = Path(path)
    d = dataset.dim
    header = ",".join([f"f{i}" for i in range(d)] + ["label", "true_label"])
    with path.open("w") as fh:
        fh.write(header + "\n")
        for i in range(len(dataset)):
            feats = ",".join(f"{v:.17g}" for v in dataset.features[i])
            fh.write(f"{feats},{dataset.labels[i]},{dataset.true_labels[i]}\n")


def load_csv_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = lines[0].split(",")
    if len(header) < 3 or header[-2] != "label" or header[-1] != "true_label":
        raise ValueError(f"{path}: line 1: bad header, want f0..fd,label,true_label")
    d = len(header) - 2
    features = np.empty((len(lines) - 1, d))
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    truths = np.empty(len(lines) - 1, dtype=np.int64)
    for row, line in enumerate(lines[1:]):
        lineno = row + 2
        cells = line.split(",")
        if len(cells) != d + 2:
            raise ValueError(f"{path}: line {lineno}: expected {d + 2} cells, got {len(cells)}")
        try:
            features[row] = [float(c) for c in cells[:d]]
            labels[row] = int(cells[d])
            truths[row] = int(cells[d + 1])
        except ValueError as exc:
            raise ValueError(f"{path}: line {lineno}: {exc}") from None
    if truths.size == 0:
        raise ValueError(f"{path}: no data rows")
    num_classes = int(truths.max()) + 1
    bad = np.flatnonzero(
        ~np.all(np.isfinite(features), axis=1)
        | (labels < UNLABELED)
        | (labels >= num_classes)
        | (truths < 0)
    )
    if bad.size:
        raise ValueError(f"{path}: line {int(bad[0]) + 2}: bad feature or label value")
    try:
        return Dataset(features, labels, truths, num_classes)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from None
