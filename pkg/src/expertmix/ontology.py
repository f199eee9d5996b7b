"""Two-layer class ontology: hop-count affinities, spectral categories, leaf order.

The category layer is obtained by spectrally clustering an inter-class
affinity matrix; the class layer is the flat list of atomic classes. The
resulting left-to-right leaf order (categories contiguous, members sorted)
is what drives sliding-window task assignment downstream.

Affinities come from one of two sources:

* a taxonomy tree, scored by how many nodes the leaf-to-leaf path travels
  (``semantic_affinity``), or
* per-class feature sets, scored by an averaged Gaussian kernel
  (``visual_affinity_matrix``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Sequence, TYPE_CHECKING

import numpy as np

from .errors import (
    InvalidArgumentError,
    InvalidDatasetError,
    InvariantError,
    ParseError,
    UnknownClassError,
)

if TYPE_CHECKING:  # pragma: no cover
    from .dataset import Dataset

SEMANTIC = "semantic"
VISUAL = "visual"


# ---------------------------------------------------------------------------
# taxonomy tree
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeNode:
    id: int
    parent: int | None
    label: str


class TaxonomyTree:
    """Rooted tree whose leaves carry the atomic classes.

    Class ``c`` corresponds to ``leaves[c]`` (leaves are listed in the order
    they appear in the node list). ``depth_max`` is the largest number of
    nodes on any root-to-leaf path, the root and the leaf both counted.
    """

    def __init__(self, nodes: Sequence[TreeNode]):
        self.nodes = list(nodes)
        if not self.nodes:
            raise InvariantError("taxonomy has no nodes")
        self._by_id: dict[int, TreeNode] = {}
        for node in self.nodes:
            if node.id in self._by_id:
                raise InvariantError(f"duplicate node id {node.id}")
            self._by_id[node.id] = node
        parent_ids = {n.parent for n in self.nodes if n.parent is not None}
        self.leaves = [n.id for n in self.nodes if n.id not in parent_ids]
        self._class_of_leaf = {leaf: c for c, leaf in enumerate(self.leaves)}
        self._depth = self._compute_depths()
        self.depth_max = max(self._depth[leaf] for leaf in self.leaves)
        self.validate()

    # -- construction -------------------------------------------------

    @classmethod
    def from_records(cls, records) -> "TaxonomyTree":
        """Build from an iterable of ``(node_id, parent_or_None, label)``."""
        return cls([TreeNode(int(i), None if p is None else int(p), str(lab))
                    for i, p, lab in records])

    @classmethod
    def from_tsv(cls, path) -> "TaxonomyTree":
        """Read the tab-separated node list ``node_id<TAB>parent_or_-<TAB>label``."""
        records = []
        with open(path, "r", encoding="utf-8") as handle:
            for lineno, raw in enumerate(handle, start=1):
                line = raw.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ParseError(
                        f"expected 3 tab-separated fields, got {len(parts)}",
                        line=lineno,
                    )
                try:
                    node_id = int(parts[0])
                except ValueError:
                    raise ParseError(f"bad node id {parts[0]!r}", line=lineno)
                if parts[1] == "-":
                    parent: int | None = None
                else:
                    try:
                        parent = int(parts[1])
                    except ValueError:
                        raise ParseError(f"bad parent id {parts[1]!r}", line=lineno)
                records.append((node_id, parent, parts[2]))
        if not records:
            raise ParseError("empty taxonomy file", line=1)
        return cls.from_records(records)

    def to_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for node in self.nodes:
                parent = "-" if node.parent is None else str(node.parent)
                handle.write(f"{node.id}\t{parent}\t{node.label}\n")

    # -- structure ----------------------------------------------------

    def _compute_depths(self) -> dict[int, int]:
        roots = [n.id for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise InvariantError(f"expected exactly one root, found {len(roots)}")
        children: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for node in self.nodes:
            if node.parent is not None:
                if node.parent not in self._by_id:
                    raise InvariantError(f"node {node.id} has unknown parent {node.parent}")
                children[node.parent].append(node.id)
        depth = {roots[0]: 1}
        stack = [roots[0]]
        while stack:
            nid = stack.pop()
            for child in children[nid]:
                depth[child] = depth[nid] + 1
                stack.append(child)
        if len(depth) != len(self.nodes):
            raise InvariantError("tree contains a cycle or unreachable nodes")
        return depth

    def validate(self) -> None:
        if not self.leaves:
            raise InvariantError("taxonomy has no leaves")
        recomputed = max(self._depth[leaf] for leaf in self.leaves)
        if recomputed != self.depth_max:
            raise InvariantError(
                f"stored depth_max {self.depth_max} != recomputed {recomputed}"
            )

    @property
    def n_classes(self) -> int:
        return len(self.leaves)

    def leaf_of_class(self, class_id: int) -> int:
        try:
            return self.leaves[class_id]
        except (IndexError, TypeError):
            raise UnknownClassError(f"unknown class id {class_id!r}")

    def hop_count(self, class_i: int, class_j: int) -> int:
        """Number of nodes traveled between two leaf classes, endpoints included."""
        a = self.leaf_of_class(class_i)
        b = self.leaf_of_class(class_j)
        ancestors = {}
        node: int | None = a
        while node is not None:
            ancestors[node] = self._depth[node]
            node = self._by_id[node].parent
        node = b
        while node not in ancestors:
            node = self._by_id[node].parent
            if node is None:  # pragma: no cover - single root guarantees a meet
                raise InvariantError("leaves do not share a root")
        lca_depth = ancestors[node]
        return self._depth[a] + self._depth[b] - 2 * lca_depth + 1


# ---------------------------------------------------------------------------
# affinity matrices
# ---------------------------------------------------------------------------


@dataclass
class AffinityMatrix:
    """Square symmetric matrix of pairwise class affinities.

    ``self_cap`` records the configured diagonal value when the construction
    pins one (hop-count affinities do); kernel-averaged matrices keep their
    computed per-class diagonal and leave it ``None``.
    """

    values: np.ndarray
    kind: str
    self_cap: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.validate()

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        if self.kind not in (SEMANTIC, VISUAL):
            raise InvalidArgumentError(f"unknown affinity kind {self.kind!r}")
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise InvariantError(f"affinity matrix must be square, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvariantError("affinity matrix has non-finite entries")
        if not np.array_equal(self.values, self.values.T):
            raise InvariantError("affinity matrix is not symmetric")
        if self.kind == VISUAL and np.any(self.values < 0):
            raise InvariantError("visual affinities must be non-negative")
        if self.self_cap is not None and not np.all(np.diag(self.values) == self.self_cap):
            raise InvariantError("diagonal does not match the configured self-affinity")

    def to_csv(self, path) -> None:
        """Write the matrix with a header row of class identifiers."""
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(",".join(str(c) for c in range(self.n)) + "\n")
            for row in self.values:
                handle.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, kind: str, self_cap: float | None = None) -> "AffinityMatrix":
        with open(path, "r", encoding="utf-8") as handle:
            lines = [line.rstrip("\n") for line in handle if line.strip()]
        if not lines:
            raise ParseError("empty affinity file", line=1)
        n = len(lines[0].split(","))
        if len(lines) != n + 1:
            raise ParseError(f"expected {n} rows after the header, got {len(lines) - 1}")
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            parts = line.split(",")
            if len(parts) != n:
                raise ParseError(f"expected {n} values, got {len(parts)}", line=lineno)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError("bad numeric value", line=lineno)
        return cls(np.array(rows, dtype=np.float64), kind=kind, self_cap=self_cap)


def self_affinity_cap(tree: TaxonomyTree) -> float:
    """Diagonal affinity value, the score of a single-node (zero-length) path."""
    return -math.log(1.0 / (2.0 * tree.depth_max))


def semantic_affinity(
    tree: TaxonomyTree,
    class_i: int,
    class_j: int,
    distance_fn: Callable[[TaxonomyTree, int, int], int] | None = None,
) -> float:
    """Affinity ``-ln(D / (2 H))`` of two leaf classes.

    ``D`` is the number of nodes traveled on the unique leaf-to-leaf path,
    both endpoints counted, and ``H`` is the tree's ``depth_max``. The node
    count convention is pluggable through ``distance_fn(tree, i, j)`` for
    callers who count hops differently; whatever it returns is clamped below
    at 1 so the affinity stays finite.
    """
    distance = distance_fn(tree, class_i, class_j) if distance_fn else tree.hop_count(class_i, class_j)
    distance = max(int(distance), 1)
    return -math.log(distance / (2.0 * tree.depth_max))


def build_semantic_matrix(
    tree: TaxonomyTree,
    distance_fn: Callable[[TaxonomyTree, int, int], int] | None = None,
) -> AffinityMatrix:
    """Pairwise hop-count affinities for all classes of a taxonomy."""
    n = tree.n_classes
    if n < 2:
        raise InvalidArgumentError("need at least 2 classes to build an affinity matrix")
    values = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i, n):
            psi = semantic_affinity(tree, i, j, distance_fn)
            values[i, j] = psi
            values[j, i] = psi
    cap = self_affinity_cap(tree)
    np.fill_diagonal(values, cap)
    return AffinityMatrix(values, kind=SEMANTIC, self_cap=cap)


# ---------------------------------------------------------------------------
# spectral partition
# ---------------------------------------------------------------------------


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    chosen = [int(rng.integers(n))]
    centers[0] = points[chosen[0]]
    for c in range(1, k):
        d2 = np.min(
            ((points[:, None, :] - centers[None, :c, :]) ** 2).sum(axis=2), axis=1
        )
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a center: take the lowest
            # index not yet used so clusters stay distinct where possible
            remaining = [i for i in range(n) if i not in chosen]
            idx = remaining[0] if remaining else chosen[0]
        else:
            idx = int(rng.choice(n, p=d2 / total))
        chosen.append(idx)
        centers[c] = points[idx]
    return centers


def _repair_empty(points: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Move the farthest point of the largest cluster into each empty cluster."""
    labels = labels.copy()
    while True:
        sizes = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(sizes == 0)
        if empty.size == 0:
            return labels
        target = int(empty[0])
        donor = int(np.argmax(sizes))  # argmax breaks ties toward the lower id
        members = np.flatnonzero(labels == donor)
        centroid = points[members].mean(axis=0)
        dist = ((points[members] - centroid) ** 2).sum(axis=1)
        mover = members[int(np.argmax(dist))]
        labels[mover] = target


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = 100) -> np.ndarray:
    centers = _kmeans_pp_init(points, k, rng)
    labels = None
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)  # equidistant points go to the lower cluster id
        new_labels = _repair_empty(points, new_labels, k)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return labels


def _canonical_labels(labels: np.ndarray, k: int) -> np.ndarray:
    """Relabel clusters so cluster ids ascend with their smallest member."""
    order = sorted(range(k), key=lambda c: int(np.flatnonzero(labels == c)[0]))
    remap = {old: new for new, old in enumerate(order)}
    return np.array([remap[int(l)] for l in labels], dtype=np.int64)


def spectral_partition(aff: AffinityMatrix, k: int, seed: int) -> np.ndarray:
    """Cluster classes into ``k`` categories by normalized spectral clustering.

    Affinities are shifted so the minimum entry is zero, the diagonal is
    dropped, and seeded k-means runs on the row-normalized eigenvectors of
    the ``k`` smallest eigenvalues of the symmetric normalized Laplacian.
    Every category comes back non-empty. Deterministic given ``seed``.
    """
    aff.validate()
    n = aff.n
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in 1..{n}, got {k}")
    if k == 1:
        return np.zeros(n, dtype=np.int64)
    if k == n:
        return np.arange(n, dtype=np.int64)

    weights = aff.values - aff.values.min()
    np.fill_diagonal(weights, 0.0)
    degree = weights.sum(axis=1)
    inv_sqrt = np.where(degree > 0.0, 1.0 / np.sqrt(np.where(degree > 0.0, degree, 1.0)), 0.0)
    lap = np.eye(n) - inv_sqrt[:, None] * weights * inv_sqrt[None, :]
    lap = (lap + lap.T) / 2.0  # keep eigh happy against rounding asymmetry

    _, vectors = np.linalg.eigh(lap)
    embedding = vectors[:, :k]
    norms = np.linalg.norm(embedding, axis=1)
    embedding = embedding / np.where(norms > 0.0, norms, 1.0)[:, None]

    labels = _kmeans(embedding, k, np.random.default_rng(seed))
    return _canonical_labels(labels, k)


# ---------------------------------------------------------------------------
# two-layer ontology
# ---------------------------------------------------------------------------


@dataclass
class TwoLayerOntology:
    """Category layer over the class layer, plus the induced leaf order."""

    categories: list[list[int]]
    leaf_order: list[int]

    def validate(self) -> None:
        flat = [c for cat in self.categories for c in cat]
        n = len(flat)
        if sorted(flat) != list(range(n)):
            raise InvariantError("categories do not partition the class set")
        if sorted(self.leaf_order) != list(range(n)):
            raise InvariantError("leaf_order is not a permutation of the classes")
        pos = 0
        for cat in self.categories:
            span = self.leaf_order[pos:pos + len(cat)]
            if sorted(span) != sorted(cat):
                raise InvariantError("a category is not contiguous in leaf_order")
            pos += len(cat)

    @property
    def n_classes(self) -> int:
        return len(self.leaf_order)

    def to_json_dict(self) -> dict:
        return {
            "format_version": 1,
            "categories": [list(cat) for cat in self.categories],
            "leaf_order": list(self.leaf_order),
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TwoLayerOntology":
        onto = cls(
            categories=[[int(c) for c in cat] for cat in doc["categories"]],
            leaf_order=[int(c) for c in doc["leaf_order"]],
        )
        onto.validate()
        return onto

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_json_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")

    @classmethod
    def load(cls, path) -> "TwoLayerOntology":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_json_dict(json.load(handle))


def build_two_layer_ontology(aff: AffinityMatrix, k: int, seed: int) -> TwoLayerOntology:
    """Partition classes into categories and emit the left-to-right leaf order.

    Categories are listed in ascending id and their members in ascending
    class id, so sibling classes always occupy a contiguous span.
    """
    assignment = spectral_partition(aff, k, seed)
    categories = [sorted(int(c) for c in np.flatnonzero(assignment == cat)) for cat in range(k)]
    leaf_order = [c for cat in categories for c in cat]
    onto = TwoLayerOntology(categories=categories, leaf_order=leaf_order)
    onto.validate()
    return onto


# ---------------------------------------------------------------------------
# visual affinities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel settings for feature-based class similarity.

    ``bandwidth=None`` selects the median pairwise distance over a capped,
    seeded sample of the pooled feature vectors.
    """

    bandwidth: float | None = None
    sample_cap: int = 256
    seed: int = 0


def _canonical_rows(features: np.ndarray) -> np.ndarray:
    """Sort rows lexicographically so sample order cannot perturb results."""
    if features.shape[0] < 2:
        return features
    order = np.lexsort(features.T[::-1])
    return features[order]


def median_bandwidth(features_by_class: Sequence[np.ndarray], cfg: KernelConfig) -> float:
    pooled = np.vstack([_canonical_rows(np.asarray(f, dtype=np.float64)) for f in features_by_class])
    pooled = _canonical_rows(pooled)
    if pooled.shape[0] > cfg.sample_cap:
        rng = np.random.default_rng(cfg.seed)
        idx = np.sort(rng.choice(pooled.shape[0], size=cfg.sample_cap, replace=False))
        pooled = pooled[idx]
    if pooled.shape[0] < 2:
        return 1.0
    d2 = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    upper = d2[np.triu_indices(pooled.shape[0], k=1)]
    med = float(np.median(np.sqrt(np.maximum(upper, 0.0))))
    return med if med > 0.0 else 1.0


def class_kernel_matrix(features_by_class: Sequence[np.ndarray], cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Averaged Gaussian kernel between every pair of per-class sample sets.

    Entry ``(i, j)`` is the mean of ``exp(-||x - y||^2 / (2 sigma^2))`` over
    all cross pairs, so unequal sample counts are normalized away. Rows of
    each class are canonically ordered first, making the result invariant to
    sample order within a class.
    """
    feats = []
    dim = None
    for c, f in enumerate(features_by_class):
        arr = np.asarray(f, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise InvalidDatasetError(f"class {c} has no feature vectors")
        if dim is None:
            dim = arr.shape[1]
        elif arr.shape[1] != dim:
            raise InvalidDatasetError("inconsistent feature dimensions across classes")
        feats.append(_canonical_rows(arr))
    sigma = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(feats, cfg)
    if sigma <= 0.0:
        raise InvalidArgumentError(f"kernel bandwidth must be positive, got {sigma}")
    m = len(feats)
    sim = np.zeros((m, m), dtype=np.float64)
    for i in range(m):
        for j in range(i, m):
            d2 = ((feats[i][:, None, :] - feats[j][None, :, :]) ** 2).sum(axis=2)
            value = float(np.exp(-d2 / (2.0 * sigma * sigma)).mean())
            sim[i, j] = value
            sim[j, i] = value
    return sim


def visual_affinity_matrix(dataset: "Dataset", cfg: KernelConfig = KernelConfig()) -> AffinityMatrix:
    """Feature-based class affinity over a full dataset's training split."""
    features = [dataset.class_features(c, split="train") for c in range(dataset.n_classes)]
    return AffinityMatrix(class_kernel_matrix(features, cfg), kind=VISUAL)
