"""Feature datasets: synthetic hierarchical Gaussians and CSV ingestion.

The synthetic generator draws category centers, class centers around them,
and unit-spread samples around the class centers, and emits a matching
root -> category -> class taxonomy. Sibling classes are therefore visually
confusable while cross-category classes separate easily, which is exactly
the structure the grouping and multi-task machinery exploits.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgumentError, InvalidDatasetError, InvariantError, ParseError
from .ontology import TaxonomyTree, TreeNode

_HEADER_RE = re.compile(r"^#dim=(\d+),classes=(\d+)$")
_SPLITS = ("train", "test")


@dataclass
class Dataset:
    """Labeled feature vectors with disjoint train/test index sets."""

    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_idx = np.asarray(self.train_idx, dtype=np.int64)
        self.test_idx = np.asarray(self.test_idx, dtype=np.int64)
        self.validate()

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def per_class_count(self) -> int | None:
        """Common per-class sample count, or None when classes are unbalanced."""
        counts = np.bincount(self.labels, minlength=self.n_classes)
        return int(counts[0]) if np.all(counts == counts[0]) else None

    def validate(self) -> None:
        if self.features.ndim != 2:
            raise InvariantError("features must be a 2-D array")
        n = self.features.shape[0]
        if self.labels.shape != (n,):
            raise InvariantError("labels do not match the sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InvariantError("labels must lie in 0..n_classes-1")
        train = set(self.train_idx.tolist())
        test = set(self.test_idx.tolist())
        if train & test:
            raise InvariantError("train and test index sets overlap")
        if train | test != set(range(n)):
            raise InvariantError("splits must cover every sample exactly once")
        for split_name, idx in (("train", self.train_idx), ("test", self.test_idx)):
            present = np.bincount(self.labels[idx], minlength=self.n_classes)
            if np.any(present == 0):
                missing = int(np.flatnonzero(present == 0)[0])
                raise InvariantError(f"class {missing} has no {split_name} samples")

    def indices(self, split: str) -> np.ndarray:
        if split not in _SPLITS:
            raise InvalidArgumentError(f"unknown split {split!r}")
        return self.train_idx if split == "train" else self.test_idx

    def class_indices(self, class_id: int, split: str = "train") -> np.ndarray:
        idx = self.indices(split)
        return idx[self.labels[idx] == class_id]

    def class_features(self, class_id: int, split: str = "train") -> np.ndarray:
        rows = self.class_indices(class_id, split)
        if rows.size == 0:
            raise InvalidDatasetError(f"class {class_id} has no {split} samples")
        return self.features[rows]


@dataclass(frozen=True)
class SynthSpec:
    """Shape of a synthetic hierarchical benchmark."""

    n_categories: int
    classes_per_category: int
    dim: int
    samples_per_class: int
    category_spread: float = 10.0
    class_spread: float = 1.0
    seed: int = 0
    train_fraction: float = 0.8

    def validate(self) -> None:
        if min(self.n_categories, self.classes_per_category, self.dim) < 1:
            raise InvalidArgumentError("counts and dimension must be >= 1")
        if self.samples_per_class < 2:
            raise InvalidArgumentError("need >= 2 samples per class to split")
        if not self.category_spread > self.class_spread > 0.0:
            raise InvalidArgumentError(
                "category_spread must exceed class_spread and both must be positive"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise InvalidArgumentError("train_fraction must be in (0, 1)")

    @property
    def n_classes(self) -> int:
        return self.n_categories * self.classes_per_category


def generate_synthetic(spec: SynthSpec) -> tuple[Dataset, TaxonomyTree]:
    """Draw the hierarchical Gaussian benchmark and its ground-truth taxonomy."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_classes
    cat_centers = rng.normal(0.0, spec.category_spread, size=(spec.n_categories, spec.dim))
    class_centers = (
        np.repeat(cat_centers, spec.classes_per_category, axis=0)
        + rng.normal(0.0, spec.class_spread, size=(n_classes, spec.dim))
    )
    features = (
        np.repeat(class_centers, spec.samples_per_class, axis=0)
        + rng.normal(0.0, 1.0, size=(n_classes * spec.samples_per_class, spec.dim))
    )
    labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
    train_idx, test_idx = _stratified_split(labels, spec.train_fraction, spec.seed)

    nodes = [TreeNode(0, None, "root")]
    for cat in range(spec.n_categories):
        nodes.append(TreeNode(1 + cat, 0, f"cat_{cat:03d}"))
    for class_id in range(n_classes):
        cat = class_id // spec.classes_per_category
        nodes.append(TreeNode(1 + spec.n_categories + class_id, 1 + cat, f"class_{class_id:04d}"))
    tree = TaxonomyTree(nodes)

    dataset = Dataset(
        features=features,
        labels=labels,
        n_classes=n_classes,
        train_idx=train_idx,
        test_idx=test_idx,
    )
    return dataset, tree


def _stratified_split(labels: np.ndarray, train_fraction: float, seed: int):
    if not 0.0 < train_fraction < 1.0:
        raise InvalidArgumentError("train_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    train_parts, test_parts = [], []
    for class_id in range(int(labels.max()) + 1):
        rows = np.flatnonzero(labels == class_id)
        if rows.size < 2:
            raise InvalidDatasetError(
                f"class {class_id} has {rows.size} samples; need >= 2 to split"
            )
        perm = rows[rng.permutation(rows.size)]
        n_train = int(round(train_fraction * rows.size))
        n_train = min(max(n_train, 1), rows.size - 1)
        train_parts.append(perm[:n_train])
        test_parts.append(perm[n_train:])
    return np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))


def split(dataset: Dataset, train_fraction: float, seed: int) -> Dataset:
    """Re-split a dataset per class, keeping both sides of every class non-empty."""
    train_idx, test_idx = _stratified_split(dataset.labels, train_fraction, seed)
    return replace(dataset, train_idx=train_idx, test_idx=test_idx)


def save_features(dataset: Dataset, path) -> None:
    """Write the CSV form: a ``#dim=,classes=`` header then one row per sample."""
    split_of = np.empty(dataset.n_samples, dtype=object)
    split_of[dataset.train_idx] = "train"
    split_of[dataset.test_idx] = "test"
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(f"#dim={dataset.dim},classes={dataset.n_classes}\n")
        for row in range(dataset.n_samples):
            values = ",".join(repr(float(v)) for v in dataset.features[row])
            handle.write(f"{split_of[row]},{int(dataset.labels[row])},{values}\n")


def load_features(path) -> Dataset:
    """Parse the CSV form written by :func:`save_features`."""
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines:
        raise ParseError("empty dataset file", line=1)
    header = _HEADER_RE.match(lines[0].strip())
    if header is None:
        raise ParseError("expected header '#dim=<d>,classes=<n>'", line=1)
    dim, n_classes = int(header.group(1)), int(header.group(2))
    features, labels, train_rows, test_rows = [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 2 + dim:
            raise ParseError(
                f"expected {2 + dim} fields (split, class, {dim} values), got {len(parts)}",
                line=lineno,
            )
        split_name = parts[0]
        if split_name not in _SPLITS:
            raise ParseError(f"unknown split label {split_name!r}", line=lineno)
        try:
            class_id = int(parts[1])
        except ValueError:
            raise ParseError(f"bad class id {parts[1]!r}", line=lineno)
        if not 0 <= class_id < n_classes:
            raise ParseError(f"class id {class_id} out of range 0..{n_classes - 1}", line=lineno)
        try:
            vector = [float(p) for p in parts[2:]]
        except ValueError:
            raise ParseError("bad numeric value", line=lineno)
        row = len(features)
        features.append(vector)
        labels.append(class_id)
        (train_rows if split_name == "train" else test_rows).append(row)
    if not features:
        raise ParseError("dataset file has no sample rows", line=2)
    try:
        return Dataset(
            features=np.array(features, dtype=np.float64),
            labels=np.array(labels, dtype=np.int64),
            n_classes=n_classes,
            train_idx=np.array(train_rows, dtype=np.int64),
            test_idx=np.array(test_rows, dtype=np.int64),
        )
    except InvariantError as exc:
        raise InvalidDatasetError(str(exc))
