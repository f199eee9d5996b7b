"""Per-group experts: shared encoder plus a coupled multi-task softmax head.

Every expert answers ``size + 1`` outputs for its task group: one per member
class and one "not-in-group" sentinel. The head weight for member slot ``j``
decomposes into a group-wide component plus a class-specific component
(``w_shared + v_class[j]``), and the member weights are tied together by a
graph-Laplacian penalty built from the inter-class visual similarity of the
group, so visually close classes share prediction structure.

The training objective is::

    data_weight * sum of cross-entropies
    + l2_penalty * (tr(W W^T) + ||w_sentinel||^2 + ||b||^2)
    + laplacian_penalty / 2 * tr(W L W^T)

with ``W`` the matrix of member head weights (the sentinel weight and the
biases get a plain ridge, not the Laplacian coupling). The ridge doubles as
probability calibration: the cross-entropy is a sum, not a mean, so the
default penalties are sized for a few-hundred-sample group, and biases are
included because unpenalized biases let the logit gaps diverge on separable
groups, which saturates the sentinel score that downstream stacking divides
by. Gradients are the exact analytic derivatives of this objective; they
are validated against central finite differences in the test suite, which
is why the encoder uses a smooth activation (tanh) rather than a kinked
one.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .errors import (
    InvalidArgumentError,
    InvalidDatasetError,
    InvalidLabelError,
    InvariantError,
    TrainingFailureError,
)
from .ontology import VISUAL, AffinityMatrix, KernelConfig, class_kernel_matrix
from .taskgroups import TaskGroup

CHECKPOINT_VERSION = 1


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


@dataclass
class Backbone:
    """Feed-forward tanh encoder with a frozen input standardizer.

    With no hidden layers the encoder is the identity map (useful for tests
    and for treating precomputed features as encodings directly).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_mean: np.ndarray
    input_scale: np.ndarray

    @classmethod
    def create(cls, input_dim: int, hidden_dims: Sequence[int], rng: np.random.Generator) -> "Backbone":
        weights, biases = [], []
        fan_in = input_dim
        for width in hidden_dims:
            weights.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(width, fan_in)))
            biases.append(np.zeros(width))
            fan_in = width
        return cls(
            weights=weights,
            biases=biases,
            input_mean=np.zeros(input_dim),
            input_scale=np.ones(input_dim),
        )

    @property
    def input_dim(self) -> int:
        return self.input_mean.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0] if self.weights else self.input_dim

    def fit_scaler(self, features: np.ndarray) -> None:
        """Standardize inputs to the training distribution (constant columns untouched)."""
        std = features.std(axis=0)
        self.input_mean = features.mean(axis=0)
        self.input_scale = np.where(std == 0.0, 1.0, std)

    def _check_input(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.input_dim:
            raise InvalidArgumentError(
                f"expected feature dimension {self.input_dim}, got shape {features.shape}"
            )
        return features

    def encode(self, features: np.ndarray) -> np.ndarray:
        out = (self._check_input(features) - self.input_mean) / self.input_scale
        for w, b in zip(self.weights, self.biases):
            out = np.tanh(out @ w.T + b)
        return out

    def encode_with_cache(self, features: np.ndarray):
        """Encode while keeping per-layer activations for backpropagation."""
        activations = [(self._check_input(features) - self.input_mean) / self.input_scale]
        for w, b in zip(self.weights, self.biases):
            activations.append(np.tanh(activations[-1] @ w.T + b))
        return activations[-1], activations

    def backward(self, activations: list[np.ndarray], grad_out: np.ndarray):
        """Gradients of the layer parameters given d(loss)/d(encoding)."""
        grad_w = [np.zeros_like(w) for w in self.weights]
        grad_b = [np.zeros_like(b) for b in self.biases]
        upstream = grad_out
        for layer in range(len(self.weights) - 1, -1, -1):
            pre_grad = upstream * (1.0 - activations[layer + 1] ** 2)
            grad_w[layer] = pre_grad.T @ activations[layer]
            grad_b[layer] = pre_grad.sum(axis=0)
            upstream = pre_grad @ self.weights[layer]
        return grad_w, grad_b


# ---------------------------------------------------------------------------
# configuration and similarity state
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by every expert (one architecture for all)."""

    data_weight: float = 1.0
    l2_penalty: float = 0.3
    laplacian_penalty: float = 0.1
    learning_rate: float = 1.0
    lr_decay: float = 0.995
    epochs: int = 100
    batch_size: int = 32
    sim_refresh_period: int = 5
    samples_per_class: int | None = None
    hidden_dims: tuple[int, ...] = (64, 32)
    freeze_class_components: bool = False
    kernel: KernelConfig = KernelConfig()
    seed: int = 0

    def validate(self) -> None:
        if self.data_weight <= 0.0:
            raise InvalidArgumentError("data_weight must be positive")
        if self.l2_penalty < 0.0 or self.laplacian_penalty < 0.0:
            raise InvalidArgumentError("penalties must be non-negative")
        if self.learning_rate <= 0.0 or not 0.0 < self.lr_decay <= 1.0:
            raise InvalidArgumentError("bad learning-rate schedule")
        if self.epochs < 1 or self.batch_size < 1 or self.sim_refresh_period < 1:
            raise InvalidArgumentError("epochs, batch_size and sim_refresh_period must be >= 1")
        if self.samples_per_class is not None and self.samples_per_class < 1:
            raise InvalidArgumentError("samples_per_class must be >= 1 when set")
        for scalar in (self.data_weight, self.l2_penalty, self.laplacian_penalty,
                       self.learning_rate, self.lr_decay):
            if not math.isfinite(scalar):
                raise InvalidArgumentError("config scalars must be finite")


@dataclass
class SimilarityState:
    """Visual similarity of the group's member classes and its graph Laplacian."""

    matrix: AffinityMatrix
    laplacian: np.ndarray

    @classmethod
    def build(cls, features_by_slot: Sequence[np.ndarray], kernel: KernelConfig = KernelConfig()) -> "SimilarityState":
        sim = class_kernel_matrix(features_by_slot, kernel)
        laplacian = np.diag(sim.sum(axis=1)) - sim
        state = cls(matrix=AffinityMatrix(sim, kind=VISUAL), laplacian=laplacian)
        state.validate()
        return state

    def validate(self) -> None:
        self.matrix.validate()
        row_sums = np.abs(self.laplacian.sum(axis=1))
        if row_sums.max(initial=0.0) > 1e-9:
            raise InvariantError(f"Laplacian row sums reach {row_sums.max():.3e}, expected 0")
        if not np.allclose(self.laplacian, self.laplacian.T, atol=1e-12):
            raise InvariantError("Laplacian is not symmetric")


def similarity_matrix(features_by_slot: Sequence[np.ndarray], kernel: KernelConfig = KernelConfig()) -> SimilarityState:
    """Averaged-kernel similarity over the member classes, plus its Laplacian."""
    return SimilarityState.build(features_by_slot, kernel)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ExpertModel:
    """Encoder plus decomposed multi-task head for one task group."""

    group: TaskGroup
    backbone: Backbone
    w_shared: np.ndarray      # (d,) group-wide component
    v_class: np.ndarray       # (size, d) per-class components
    w_sentinel: np.ndarray    # (d,) not-in-group output weight
    bias: np.ndarray          # (size + 1,)
    loss_trajectory: list[float] = field(default_factory=list)
    similarity: SimilarityState | None = field(default=None, repr=False)
    train_config: TrainConfig | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return self.group.size

    @property
    def encoding_dim(self) -> int:
        return self.backbone.out_dim

    def head_rows(self) -> np.ndarray:
        """Effective member weights, one row per slot: ``w_shared + v_class``."""
        return self.w_shared[None, :] + self.v_class

    def all_rows(self) -> np.ndarray:
        """Member rows with the sentinel weight appended."""
        return np.vstack([self.head_rows(), self.w_sentinel[None, :]])

    def logits(self, encodings: np.ndarray) -> np.ndarray:
        return encodings @ self.all_rows().T + self.bias

    @classmethod
    def create(cls, group: TaskGroup, input_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> "ExpertModel":
        backbone = Backbone.create(input_dim, cfg.hidden_dims, rng)
        d = backbone.out_dim
        return cls(
            group=group,
            backbone=backbone,
            w_shared=np.zeros(d),
            v_class=np.zeros((group.size, d)),
            w_sentinel=np.zeros(d),
            bias=np.zeros(group.size + 1),
            train_config=cfg,
        )


def forward(model: ExpertModel, x: np.ndarray) -> np.ndarray:
    """Probabilities over the group's ``size + 1`` outputs for one input."""
    return forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])[0]


def forward_batch(model: ExpertModel, features: np.ndarray) -> np.ndarray:
    return softmax(model.logits(model.backbone.encode(features)))


def _check_labels(model: ExpertModel, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > model.size):
        raise InvalidLabelError(
            f"labels must be slots 0..{model.size} (sentinel included)"
        )
    return labels


def loss(model: ExpertModel, features: np.ndarray, labels: np.ndarray,
         sim: SimilarityState, cfg: TrainConfig) -> float:
    """Summed cross-entropy plus ridge and Laplacian-coupling penalties."""
    labels = _check_labels(model, labels)
    log_p = log_softmax(model.logits(model.backbone.encode(features)))
    data = -cfg.data_weight * log_p[np.arange(labels.size), labels].sum()
    rows = model.head_rows()
    ridge = cfg.l2_penalty * (
        float((rows ** 2).sum())
        + float((model.w_sentinel ** 2).sum())
        + float((model.bias ** 2).sum())
    )
    gram = rows @ rows.T
    coupling = 0.5 * cfg.laplacian_penalty * float((sim.laplacian * gram).sum())
    return float(data + ridge + coupling)


@dataclass
class ExpertGradients:
    backbone_weights: list[np.ndarray]
    backbone_biases: list[np.ndarray]
    w_shared: np.ndarray
    v_class: np.ndarray
    w_sentinel: np.ndarray
    bias: np.ndarray

    def to_vector(self) -> np.ndarray:
        parts = [g.ravel() for g in self.backbone_weights]
        parts += [g.ravel() for g in self.backbone_biases]
        parts += [self.w_shared.ravel(), self.v_class.ravel(),
                  self.w_sentinel.ravel(), self.bias.ravel()]
        return np.concatenate(parts) if parts else np.empty(0)


def gradient(model: ExpertModel, features: np.ndarray, labels: np.ndarray,
             sim: SimilarityState, cfg: TrainConfig) -> ExpertGradients:
    """Exact analytic gradient of :func:`loss` for every parameter."""
    labels = _check_labels(model, labels)
    encoded, activations = model.backbone.encode_with_cache(features)
    probs = softmax(model.logits(encoded))
    resid = probs.copy()
    resid[np.arange(labels.size), labels] -= 1.0
    resid *= cfg.data_weight

    grad_rows_all = resid.T @ encoded          # (size + 1, d) data term
    grad_bias = resid.sum(axis=0)

    grad_v = grad_rows_all[:-1].copy()
    grad_sentinel = grad_rows_all[-1].copy()

    rows = model.head_rows()
    grad_v += 2.0 * cfg.l2_penalty * rows
    grad_sentinel += 2.0 * cfg.l2_penalty * model.w_sentinel
    grad_bias = grad_bias + 2.0 * cfg.l2_penalty * model.bias
    grad_v += cfg.laplacian_penalty * (sim.laplacian @ rows)
    grad_shared = grad_v.sum(axis=0)           # every member row contains w_shared

    grad_encoding = resid @ model.all_rows()
    grad_bw, grad_bb = model.backbone.backward(activations, grad_encoding)
    return ExpertGradients(
        backbone_weights=grad_bw,
        backbone_biases=grad_bb,
        w_shared=grad_shared,
        v_class=grad_v,
        w_sentinel=grad_sentinel,
        bias=grad_bias,
    )


def parameter_vector(model: ExpertModel) -> np.ndarray:
    parts = [w.ravel() for w in model.backbone.weights]
    parts += [b.ravel() for b in model.backbone.biases]
    parts += [model.w_shared.ravel(), model.v_class.ravel(),
              model.w_sentinel.ravel(), model.bias.ravel()]
    return np.concatenate(parts) if parts else np.empty(0)


def set_parameter_vector(model: ExpertModel, vector: np.ndarray) -> None:
    cursor = 0

    def take(template: np.ndarray) -> np.ndarray:
        nonlocal cursor
        block = vector[cursor:cursor + template.size].reshape(template.shape)
        cursor += template.size
        return block.copy()

    model.backbone.weights = [take(w) for w in model.backbone.weights]
    model.backbone.biases = [take(b) for b in model.backbone.biases]
    model.w_shared = take(model.w_shared)
    model.v_class = take(model.v_class)
    model.w_sentinel = take(model.w_sentinel)
    model.bias = take(model.bias)
    if cursor != vector.size:
        raise InvalidArgumentError("parameter vector has the wrong length")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def sample_not_in_group(dataset: Dataset, group: TaskGroup, count: int, seed: int):
    """Seeded draw of out-of-group training samples, labeled with the sentinel slot."""
    members = set(group.members)
    pool = dataset.train_idx[~np.isin(dataset.labels[dataset.train_idx], list(members))]
    if pool.size == 0:
        raise InvalidDatasetError("no out-of-group samples exist for this group")
    if count > pool.size:
        raise InvalidDatasetError(
            f"requested {count} out-of-group samples but only {pool.size} exist"
        )
    if count == 0:
        return np.empty((0, dataset.dim)), np.empty(0, dtype=np.int64)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(pool, size=count, replace=False))
    labels = np.full(count, group.sentinel_slot, dtype=np.int64)
    return dataset.features[picked], labels


def _group_training_arrays(dataset: Dataset, group: TaskGroup, cfg: TrainConfig,
                           rng: np.random.Generator):
    per_slot_features = []
    for class_id in group.members:
        rows = dataset.class_indices(class_id, split="train")
        if rows.size == 0:
            raise InvalidDatasetError(f"class {class_id} has no training samples")
        if cfg.samples_per_class is not None and cfg.samples_per_class < rows.size:
            rows = np.sort(rng.choice(rows, size=cfg.samples_per_class, replace=False))
        per_slot_features.append(dataset.features[rows])
    sentinel_count = max(f.shape[0] for f in per_slot_features)
    sent_x, sent_y = sample_not_in_group(dataset, group, sentinel_count, cfg.seed + 1)
    features = np.vstack(per_slot_features + [sent_x])
    labels = np.concatenate(
        [np.full(f.shape[0], slot, dtype=np.int64) for slot, f in enumerate(per_slot_features)]
        + [sent_y]
    )
    return features, labels, per_slot_features


def _apply_step(model: ExpertModel, grads: ExpertGradients, step: float, freeze_v: bool) -> None:
    for w, g in zip(model.backbone.weights, grads.backbone_weights):
        w -= step * g
    for b, g in zip(model.backbone.biases, grads.backbone_biases):
        b -= step * g
    model.w_shared -= step * grads.w_shared
    if not freeze_v:
        model.v_class -= step * grads.v_class
    model.w_sentinel -= step * grads.w_sentinel
    model.bias -= step * grads.bias


def train_expert(group: TaskGroup, dataset: Dataset, cfg: TrainConfig) -> ExpertModel:
    """Mini-batch gradient descent on the joint objective for one group.

    The training set is the group members' training samples plus an equal
    count of sentinel samples drawn from outside the group. The similarity
    state starts from raw input features and is refreshed from the current
    encoder outputs every ``sim_refresh_period`` epochs. Deterministic given
    ``cfg.seed``; the per-epoch objective over the full training set is
    recorded on ``loss_trajectory``.
    """
    cfg.validate()
    missing = [c for c in group.members if not 0 <= c < dataset.n_classes]
    if missing:
        raise InvalidDatasetError(f"dataset lacks group classes {missing}")
    rng = np.random.default_rng(cfg.seed)

    features, labels, per_slot = _group_training_arrays(dataset, group, cfg, rng)
    model = ExpertModel.create(group, dataset.dim, cfg, rng)
    model.backbone.fit_scaler(features)
    sim = SimilarityState.build(per_slot, cfg.kernel)

    n = features.shape[0]
    model.loss_trajectory.append(loss(model, features, labels, sim, cfg))
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grads = gradient(model, features[batch], labels[batch], sim, cfg)
            _apply_step(model, grads, lr / batch.size, cfg.freeze_class_components)
        if (epoch + 1) % cfg.sim_refresh_period == 0 and epoch + 1 < cfg.epochs:
            sim = SimilarityState.build(
                [model.backbone.encode(f) for f in per_slot], cfg.kernel
            )
        objective = loss(model, features, labels, sim, cfg)
        if not math.isfinite(objective):
            raise TrainingFailureError("training diverged", epoch=epoch)
        model.loss_trajectory.append(objective)
    model.similarity = sim
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _num(value) -> str:
    return format(float(value), ".17g")


def _num_list(array: np.ndarray):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 1:
        return [_num(v) for v in array]
    return [_num_list(row) for row in array]


def _parse_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


def _config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "data_weight": _num(cfg.data_weight),
        "l2_penalty": _num(cfg.l2_penalty),
        "laplacian_penalty": _num(cfg.laplacian_penalty),
        "learning_rate": _num(cfg.learning_rate),
        "lr_decay": _num(cfg.lr_decay),
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "sim_refresh_period": cfg.sim_refresh_period,
        "samples_per_class": cfg.samples_per_class,
        "hidden_dims": list(cfg.hidden_dims),
        "freeze_class_components": cfg.freeze_class_components,
        "kernel": {
            "bandwidth": None if cfg.kernel.bandwidth is None else _num(cfg.kernel.bandwidth),
            "sample_cap": cfg.kernel.sample_cap,
            "seed": cfg.kernel.seed,
        },
        "seed": cfg.seed,
    }


def _config_from_dict(doc: dict) -> TrainConfig:
    kernel = doc.get("kernel", {})
    bandwidth = kernel.get("bandwidth")
    return TrainConfig(
        data_weight=float(doc["data_weight"]),
        l2_penalty=float(doc["l2_penalty"]),
        laplacian_penalty=float(doc["laplacian_penalty"]),
        learning_rate=float(doc["learning_rate"]),
        lr_decay=float(doc["lr_decay"]),
        epochs=int(doc["epochs"]),
        batch_size=int(doc["batch_size"]),
        sim_refresh_period=int(doc["sim_refresh_period"]),
        samples_per_class=None if doc.get("samples_per_class") is None else int(doc["samples_per_class"]),
        hidden_dims=tuple(int(w) for w in doc["hidden_dims"]),
        freeze_class_components=bool(doc["freeze_class_components"]),
        kernel=KernelConfig(
            bandwidth=None if bandwidth is None else float(bandwidth),
            sample_cap=int(kernel.get("sample_cap", 256)),
            seed=int(kernel.get("seed", 0)),
        ),
        seed=int(doc["seed"]),
    )


def save_expert(model: ExpertModel, path) -> None:
    """Write the versioned checkpoint; numbers go out as 17-digit decimal text."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "group": {"index": model.group.index, "members": list(model.group.members)},
        "config": None if model.train_config is None else _config_to_dict(model.train_config),
        "backbone_params": {
            "weights": [_num_list(w) for w in model.backbone.weights],
            "biases": [_num_list(b) for b in model.backbone.biases],
            "input_mean": _num_list(model.backbone.input_mean),
            "input_scale": _num_list(model.backbone.input_scale),
        },
        "W0": _num_list(model.w_shared),
        "V": _num_list(model.v_class),
        "w_nig": _num_list(model.w_sentinel),
        "b": _num_list(model.bias),
        "loss_trajectory": [_num(v) for v in model.loss_trajectory],
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_expert(path) -> ExpertModel:
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise InvalidArgumentError(
            f"unsupported checkpoint version {doc.get('format_version')!r}"
        )
    backbone = Backbone(
        weights=[_parse_array(w) for w in doc["backbone_params"]["weights"]],
        biases=[_parse_array(b) for b in doc["backbone_params"]["biases"]],
        input_mean=_parse_array(doc["backbone_params"]["input_mean"]),
        input_scale=_parse_array(doc["backbone_params"]["input_scale"]),
    )
    group = TaskGroup(int(doc["group"]["index"]), tuple(int(c) for c in doc["group"]["members"]))
    return ExpertModel(
        group=group,
        backbone=backbone,
        w_shared=_parse_array(doc["W0"]),
        v_class=_parse_array(doc["V"]),
        w_sentinel=_parse_array(doc["w_nig"]),
        bias=_parse_array(doc["b"]),
        loss_trajectory=[float(v) for v in doc["loss_trajectory"]],
        train_config=None if doc.get("config") is None else _config_from_dict(doc["config"]),
    )
