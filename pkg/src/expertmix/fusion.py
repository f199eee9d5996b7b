"""Fusing diverse expert outputs into one large-vocabulary classifier.

Every expert scores only its own member classes plus a "not-in-group"
sentinel. The stacking step turns those partial views into one full-length
score vector per sample, using either of two combination rules:

* ``odds``: member scores weighted by the sentinel odds ``(1 - phi) / phi``,
  so an expert that is confident the sample is outside its group contributes
  almost nothing;
* ``scaled``: member scores weighted by ``overlap * phi`` (the overlap factor
  is replaced by 1 when the plan has no overlap, since a zero factor would
  erase the features and any positive constant is absorbed by the trained
  head anyway).

Classes outside a group contribute exactly zero for that group. The stacked
vectors feed a final linear softmax over all classes; an optional refinement
pass backpropagates the final-softmax error through the stacking rule into
the expert heads.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset
from .errors import InvalidArgumentError, TrainingFailureError
from .expert import (
    ExpertModel,
    forward,
    load_expert,
    log_softmax,
    save_expert,
    softmax,
)
from .taskgroups import GroupingPlan

SENTINEL_EPS = 1e-6
ODDS = "odds"
SCALED = "scaled"
VARIANTS = (ODDS, SCALED)
MIXTURE_VERSION = 1


# ---------------------------------------------------------------------------
# expert scores and stacking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpertScores:
    """One expert's view of one sample: member-class scores plus sentinel score."""

    class_ids: tuple[int, ...]
    probs: np.ndarray
    sentinel_prob: float


@dataclass(frozen=True)
class StackedFeature:
    """Fused per-class appearance scores for one sample."""

    values: np.ndarray
    variant: str


def expert_scores(model: ExpertModel, x: np.ndarray) -> ExpertScores:
    """Member probabilities keyed by global class id, and the clamped sentinel score.

    The sentinel probability is clamped away from 0 and 1 because the odds
    stacking rule divides by it.
    """
    probs = forward(model, x)
    phi = float(np.clip(probs[-1], SENTINEL_EPS, 1.0 - SENTINEL_EPS))
    return ExpertScores(model.group.members, probs[:-1].copy(), phi)


def _scores_batch(model: ExpertModel, features: np.ndarray):
    from .expert import forward_batch

    probs = forward_batch(model, features)
    phi = np.clip(probs[:, -1], SENTINEL_EPS, 1.0 - SENTINEL_EPS)
    return probs[:, :-1], phi


def stack_from_scores(scores: Sequence[ExpertScores], n_classes: int,
                      overlap: float, variant: str) -> np.ndarray:
    """Combine per-expert scores into the fused per-class vector.

    Non-member classes of a group have a zero prediction score there, so
    their terms vanish regardless of the membership weighting.
    """
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown stacking variant {variant!r}")
    fused = np.zeros(n_classes, dtype=np.float64)
    if variant == ODDS:
        for sc in scores:
            factor = (1.0 - sc.sentinel_prob) / sc.sentinel_prob
            fused[list(sc.class_ids)] += sc.probs * factor
    else:
        scale = overlap if overlap > 0.0 else 1.0
        for sc in scores:
            fused[list(sc.class_ids)] += scale * sc.probs * sc.sentinel_prob
    return fused


def _check_experts_match(experts: Sequence[ExpertModel], plan: GroupingPlan) -> None:
    if len(experts) != plan.theta:
        raise InvalidArgumentError(
            f"plan has {plan.theta} groups but {len(experts)} experts were given"
        )
    for expert, group in zip(experts, plan.groups):
        if expert.group.index != group.index or expert.group.members != group.members:
            raise InvalidArgumentError(
                f"expert {expert.group.index} does not match plan group {group.index}"
            )


def stack_features(experts: Sequence[ExpertModel], plan: GroupingPlan, x: np.ndarray,
                   overlap: float | None = None, variant: str = ODDS) -> StackedFeature:
    """Fused per-class appearance scores for one sample."""
    _check_experts_match(experts, plan)
    lam = plan.overlap if overlap is None else overlap
    scores = [expert_scores(model, x) for model in experts]
    return StackedFeature(stack_from_scores(scores, plan.n_classes, lam, variant), variant)


def stack_matrix(experts: Sequence[ExpertModel], plan: GroupingPlan, features: np.ndarray,
                 overlap: float | None = None, variant: str = ODDS) -> np.ndarray:
    """Fused score vectors for a whole feature matrix (one row per sample)."""
    _check_experts_match(experts, plan)
    if variant not in VARIANTS:
        raise InvalidArgumentError(f"unknown stacking variant {variant!r}")
    lam = plan.overlap if overlap is None else overlap
    fused = np.zeros((features.shape[0], plan.n_classes), dtype=np.float64)
    for model in experts:
        probs, phi = _scores_batch(model, features)
        cols = list(model.group.members)
        if variant == ODDS:
            fused[:, cols] += probs * ((1.0 - phi) / phi)[:, None]
        else:
            scale = lam if lam > 0.0 else 1.0
            fused[:, cols] += scale * probs * phi[:, None]
    return fused


# ---------------------------------------------------------------------------
# linear softmax head
# ---------------------------------------------------------------------------


@dataclass
class LinearSoftmax:
    """Plain multinomial logistic layer: ``softmax(W x + b)``."""

    weights: np.ndarray   # (classes, features)
    bias: np.ndarray      # (classes,)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.bias


def head_loss(weights: np.ndarray, bias: np.ndarray,
              features: np.ndarray, labels: np.ndarray) -> float:
    """Summed cross-entropy of the linear softmax (the fused-head objective)."""
    log_p = log_softmax(features @ weights.T + bias)
    return float(-log_p[np.arange(labels.size), labels].sum())


def head_gradient(weights: np.ndarray, bias: np.ndarray,
                  features: np.ndarray, labels: np.ndarray):
    """Exact analytic gradient of :func:`head_loss`."""
    probs = softmax(features @ weights.T + bias)
    probs[np.arange(labels.size), labels] -= 1.0
    return probs.T @ features, probs.sum(axis=0)


@dataclass(frozen=True)
class HeadConfig:
    """Stacking-head (and early-fusion head) training hyperparameters."""

    learning_rate: float = 0.5
    lr_decay: float = 0.99
    epochs: int = 150
    batch_size: int = 64
    seed: int = 0
    refine_experts: bool = False
    refine_learning_rate: float = 0.02
    refine_epochs: int = 5

    def validate(self) -> None:
        if self.learning_rate <= 0.0 or not 0.0 < self.lr_decay <= 1.0:
            raise InvalidArgumentError("bad head learning-rate schedule")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("head epochs and batch_size must be >= 1")
        if self.refine_experts and (self.refine_learning_rate <= 0.0 or self.refine_epochs < 1):
            raise InvalidArgumentError("bad refinement schedule")


def fit_linear_softmax(features: np.ndarray, labels: np.ndarray, n_classes: int,
                       cfg: HeadConfig = HeadConfig()) -> LinearSoftmax:
    """Seeded mini-batch descent on the summed cross-entropy.

    Optimization runs on column-standardized features for conditioning (the
    fused scores can span several orders of magnitude); the standardization
    is folded back into the returned weights, so the fitted head consumes
    raw feature vectors.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    scale = np.where(std == 0.0, 1.0, std)
    scaled = (features - mean) / scale

    rng = np.random.default_rng(cfg.seed)
    weights = np.zeros((n_classes, features.shape[1]))
    bias = np.zeros(n_classes)
    n = features.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            grad_w, grad_b = head_gradient(weights, bias, scaled[batch], labels[batch])
            weights -= (lr / batch.size) * grad_w
            bias -= (lr / batch.size) * grad_b
        if not (np.all(np.isfinite(weights)) and np.all(np.isfinite(bias))):
            raise TrainingFailureError("head training diverged", epoch=epoch)

    raw_weights = weights / scale[None, :]
    raw_bias = bias - raw_weights @ mean
    return LinearSoftmax(weights=raw_weights, bias=raw_bias)


# ---------------------------------------------------------------------------
# mixture model
# ---------------------------------------------------------------------------


@dataclass
class MixtureModel:
    """Trained experts plus the fused-score softmax over all classes."""

    experts: list[ExpertModel]
    plan: GroupingPlan
    head: LinearSoftmax
    variant: str
    overlap: float

    def __post_init__(self):
        _check_experts_match(self.experts, self.plan)
        if self.head.n_features != self.plan.n_classes or self.head.n_classes != self.plan.n_classes:
            raise InvalidArgumentError("stacking head shape does not match the class count")

    @property
    def n_classes(self) -> int:
        return self.plan.n_classes


def train_stacking_head(experts: Sequence[ExpertModel], plan: GroupingPlan,
                        dataset: Dataset, variant: str = ODDS,
                        cfg: HeadConfig = HeadConfig()) -> MixtureModel:
    """Fit the final softmax on fused training-sample scores.

    With ``cfg.refine_experts`` the expert head parameters are additionally
    refined in place by backpropagating the final-softmax error through the
    stacking rule (the encoders stay frozen).
    """
    _check_experts_match(experts, plan)
    fused = stack_matrix(experts, plan, dataset.features[dataset.train_idx], variant=variant)
    labels = dataset.labels[dataset.train_idx]
    head = fit_linear_softmax(fused, labels, plan.n_classes, cfg)
    mixture = MixtureModel(
        experts=list(experts), plan=plan, head=head, variant=variant, overlap=plan.overlap
    )
    if cfg.refine_experts:
        _refine_expert_heads(mixture, dataset, cfg)
    return mixture


def _refine_expert_heads(mixture: MixtureModel, dataset: Dataset, cfg: HeadConfig) -> None:
    """Joint descent on the fused-head objective through the stacking rule."""
    rng = np.random.default_rng(cfg.seed + 1)
    features = dataset.features[dataset.train_idx]
    labels = dataset.labels[dataset.train_idx]
    n = features.shape[0]
    scale = mixture.overlap if mixture.overlap > 0.0 else 1.0
    for epoch in range(cfg.refine_epochs):
        lr = cfg.refine_learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            bx, by = features[batch], labels[batch]
            step = lr / batch.size

            caches = []
            fused = np.zeros((bx.shape[0], mixture.n_classes))
            for model in mixture.experts:
                encoded = model.backbone.encode(bx)
                probs = softmax(model.logits(encoded))
                raw_phi = probs[:, -1]
                phi = np.clip(raw_phi, SENTINEL_EPS, 1.0 - SENTINEL_EPS)
                inside = (raw_phi > SENTINEL_EPS) & (raw_phi < 1.0 - SENTINEL_EPS)
                cols = list(model.group.members)
                if mixture.variant == ODDS:
                    fused[:, cols] += probs[:, :-1] * ((1.0 - phi) / phi)[:, None]
                else:
                    fused[:, cols] += scale * probs[:, :-1] * phi[:, None]
                caches.append((encoded, probs, phi, inside, cols))

            head_probs = softmax(mixture.head.logits(fused))
            head_probs[np.arange(by.size), by] -= 1.0
            grad_w = head_probs.T @ fused
            grad_b = head_probs.sum(axis=0)
            grad_fused = head_probs @ mixture.head.weights
            mixture.head.weights -= step * grad_w
            mixture.head.bias -= step * grad_b

            for model, (encoded, probs, phi, inside, cols) in zip(mixture.experts, caches):
                upstream = grad_fused[:, cols]
                grad_p = np.zeros_like(probs)
                member = probs[:, :-1]
                if mixture.variant == ODDS:
                    grad_p[:, :-1] = upstream * ((1.0 - phi) / phi)[:, None]
                    grad_p[:, -1] = -(upstream * member).sum(axis=1) / phi ** 2 * inside
                else:
                    grad_p[:, :-1] = upstream * (scale * phi)[:, None]
                    grad_p[:, -1] = scale * (upstream * member).sum(axis=1) * inside
                inner = (probs * grad_p).sum(axis=1, keepdims=True)
                grad_z = probs * (grad_p - inner)

                rows_grad = grad_z.T @ encoded
                model.v_class -= step * rows_grad[:-1]
                model.w_shared -= step * rows_grad[:-1].sum(axis=0)
                model.w_sentinel -= step * rows_grad[-1]
                model.bias -= step * grad_z.sum(axis=0)


# ---------------------------------------------------------------------------
# prediction
# ---------------------------------------------------------------------------


def _ranked(scores: np.ndarray) -> np.ndarray:
    """Descending score order; ties go to the lower class id."""
    return np.argsort(-scores, axis=-1, kind="stable")


def rank_matrix(model, features: np.ndarray):
    """Full ranking (ids and softmax scores) for each row of ``features``."""
    if isinstance(model, MixtureModel):
        fused = stack_matrix(model.experts, model.plan, features,
                             overlap=model.overlap, variant=model.variant)
        scores = softmax(model.head.logits(fused))
    elif isinstance(model, EarlyFusionModel):
        scores = softmax(model.head.logits(_concat_encodings(model.experts, features)))
    else:
        raise InvalidArgumentError(f"cannot rank with {type(model).__name__}")
    order = _ranked(scores)
    return order, np.take_along_axis(scores, order, axis=1)


def predict(mixture, x: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Top-``k`` ``(class id, score)`` pairs for one sample."""
    n = mixture.n_classes
    if not 1 <= k <= n:
        raise InvalidArgumentError(f"k must be in 1..{n}, got {k}")
    order, scores = rank_matrix(mixture, np.asarray(x, dtype=np.float64)[None, :])
    return [(int(c), float(s)) for c, s in zip(order[0, :k], scores[0, :k])]


# ---------------------------------------------------------------------------
# early fusion
# ---------------------------------------------------------------------------


@dataclass
class EarlyFusionModel:
    """One softmax over the concatenated expert encodings."""

    experts: list[ExpertModel]
    head: LinearSoftmax

    @property
    def n_classes(self) -> int:
        return self.head.n_classes


def concat_dim(experts: Sequence[ExpertModel]) -> int:
    """Width of the concatenated encoding; all encoders must agree on width."""
    dims = {model.encoding_dim for model in experts}
    if len(dims) != 1:
        raise InvalidArgumentError(f"experts disagree on encoding width: {sorted(dims)}")
    return len(experts) * dims.pop()


def _concat_encodings(experts: Sequence[ExpertModel], features: np.ndarray) -> np.ndarray:
    concat_dim(experts)
    return np.hstack([model.backbone.encode(features) for model in experts])


def early_fusion_train(experts: Sequence[ExpertModel], dataset: Dataset,
                       cfg: HeadConfig = HeadConfig()) -> EarlyFusionModel:
    """Fit one softmax over all classes on the concatenated encodings."""
    encoded = _concat_encodings(experts, dataset.features[dataset.train_idx])
    head = fit_linear_softmax(encoded, dataset.labels[dataset.train_idx],
                              dataset.n_classes, cfg)
    return EarlyFusionModel(experts=list(experts), head=head)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def _num(value) -> str:
    return format(float(value), ".17g")


def save_mixture(mixture: MixtureModel, path, expert_paths: Sequence[str] | None = None) -> None:
    """Write the mixture checkpoint; expert checkpoints are referenced by path.

    When ``expert_paths`` is omitted the experts are written next to the
    mixture file as ``expert_<index>.json``.
    """
    path = Path(path)
    if expert_paths is None:
        expert_paths = []
        for model in mixture.experts:
            name = f"expert_{model.group.index:03d}.json"
            save_expert(model, path.parent / name)
            expert_paths.append(name)
    doc = {
        "format_version": MIXTURE_VERSION,
        "plan": mixture.plan.to_json_dict(),
        "expert_checkpoint_paths": list(expert_paths),
        "variant": mixture.variant,
        "lambda": mixture.overlap,
        "head_params": {
            "weights": [[_num(v) for v in row] for row in mixture.head.weights],
            "bias": [_num(v) for v in mixture.head.bias],
        },
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def save_early_fusion(model: EarlyFusionModel, path, expert_paths: Sequence[str] | None = None) -> None:
    """Write the early-fusion head next to its expert checkpoints."""
    path = Path(path)
    if expert_paths is None:
        expert_paths = []
        for expert in model.experts:
            name = f"expert_{expert.group.index:03d}.json"
            save_expert(expert, path.parent / name)
            expert_paths.append(name)
    doc = {
        "format_version": MIXTURE_VERSION,
        "expert_checkpoint_paths": list(expert_paths),
        "head_params": {
            "weights": [[_num(v) for v in row] for row in model.head.weights],
            "bias": [_num(v) for v in model.head.bias],
        },
    }
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(doc, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_early_fusion(path) -> EarlyFusionModel:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    experts = []
    for rel in doc["expert_checkpoint_paths"]:
        rel_path = Path(rel)
        experts.append(load_expert(rel_path if rel_path.is_absolute() else path.parent / rel_path))
    head = LinearSoftmax(
        weights=np.array(doc["head_params"]["weights"], dtype=np.float64),
        bias=np.array(doc["head_params"]["bias"], dtype=np.float64),
    )
    return EarlyFusionModel(experts=experts, head=head)


def load_mixture(path) -> MixtureModel:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    if doc.get("format_version") != MIXTURE_VERSION:
        raise InvalidArgumentError(
            f"unsupported mixture checkpoint version {doc.get('format_version')!r}"
        )
    plan = GroupingPlan.from_json_dict(doc["plan"])
    experts = []
    for rel in doc["expert_checkpoint_paths"]:
        rel_path = Path(rel)
        experts.append(load_expert(rel_path if rel_path.is_absolute() else path.parent / rel_path))
    head = LinearSoftmax(
        weights=np.array(doc["head_params"]["weights"], dtype=np.float64),
        bias=np.array(doc["head_params"]["bias"], dtype=np.float64),
    )
    return MixtureModel(
        experts=experts,
        plan=plan,
        head=head,
        variant=doc["variant"],
        overlap=float(doc["lambda"]),
    )
