"""End-to-end pipeline, evaluation metrics, and the ablation driver.

``run_pipeline`` wires the public module operations together: dataset ->
affinity/ontology -> grouping plan -> expert training -> fusion ->
evaluation, writing a JSON report, per-class CSV, checkpoints, and (by
default) rendered figures next to the delimited outputs. Everything is
deterministic given the config seed; wall-clock timings are the only
non-reproducible report content and live under their own key.

``run_ablation`` sweeps assignment strategy, overlap, stacking variant,
fusion level, and the Laplacian-coupling strength over shared data and
seeds, adds a monolithic single-softmax baseline, and merges the per-cell
results into one comparison table plus accuracy-versus-overlap and
accuracy-versus-expert-count plot data.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fusion as fusion_mod
from . import plots
from .dataset import Dataset, SynthSpec, generate_synthetic, load_features, save_features
from .errors import (
    ExpertMixError,
    InvalidArgumentError,
    InvalidDatasetError,
    ParseError,
    PipelineStageError,
    TrainingFailureError,
)
from .expert import Backbone, TrainConfig, softmax, train_expert
from .fusion import HeadConfig, early_fusion_train, rank_matrix, train_stacking_head
from .ontology import (
    AffinityMatrix,
    KernelConfig,
    TaxonomyTree,
    TwoLayerOntology,
    build_semantic_matrix,
    build_two_layer_ontology,
    visual_affinity_matrix,
)
from .taskgroups import GroupingPlan, generate_groups, random_groups

REPORT_VERSION = 1


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _as_id_rankings(rankings) -> np.ndarray:
    rows = []
    for ranking in rankings:
        rows.append([entry[0] if isinstance(entry, (tuple, list)) else entry
                     for entry in ranking])
    return np.asarray(rows, dtype=np.int64)


def topk_accuracy(rankings, labels, k: int) -> float:
    """Fraction of samples whose true class appears in the first ``k`` entries."""
    ranked = _as_id_rankings(rankings)
    labels = np.asarray(labels, dtype=np.int64)
    if k < 1 or k > ranked.shape[1]:
        raise InvalidArgumentError(
            f"k must be in 1..{ranked.shape[1]} (ranking length), got {k}"
        )
    return float((ranked[:, :k] == labels[:, None]).any(axis=1).mean())


def per_class_accuracy(rankings, labels, n_classes: int | None = None):
    """Top-1 accuracy per class, plus the descending accuracy curve."""
    ranked = _as_id_rankings(rankings)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        missing = int(np.flatnonzero(counts == 0)[0])
        raise InvalidDatasetError(f"class {missing} has no test samples")
    hits = np.zeros(n_classes)
    np.add.at(hits, labels, (ranked[:, 0] == labels).astype(np.float64))
    by_class = hits / counts
    return by_class, np.sort(by_class)[::-1]


# ---------------------------------------------------------------------------
# monolithic baseline
# ---------------------------------------------------------------------------


@dataclass
class MonolithicModel:
    """Single encoder + one softmax over every class (no groups, no sentinel)."""

    backbone: Backbone
    weights: np.ndarray
    bias: np.ndarray
    loss_trajectory: list[float] = field(default_factory=list)

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def rank(self, features: np.ndarray):
        scores = softmax(self.backbone.encode(features) @ self.weights.T + self.bias)
        order = np.argsort(-scores, axis=1, kind="stable")
        return order, np.take_along_axis(scores, order, axis=1)


def train_monolithic(dataset: Dataset, cfg: TrainConfig) -> MonolithicModel:
    """Train the enlarged-softmax baseline on the full training split."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    features = dataset.features[dataset.train_idx]
    labels = dataset.labels[dataset.train_idx]
    backbone = Backbone.create(dataset.dim, cfg.hidden_dims, rng)
    backbone.fit_scaler(features)
    weights = np.zeros((dataset.n_classes, backbone.out_dim))
    bias = np.zeros(dataset.n_classes)
    model = MonolithicModel(backbone=backbone, weights=weights, bias=bias)

    n = features.shape[0]
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay ** epoch
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            encoded, activations = backbone.encode_with_cache(features[batch])
            probs = softmax(encoded @ weights.T + bias)
            probs[np.arange(batch.size), labels[batch]] -= 1.0
            probs *= cfg.data_weight
            grad_w = probs.T @ encoded + 2.0 * cfg.l2_penalty * weights
            grad_b = probs.sum(axis=0) + 2.0 * cfg.l2_penalty * bias
            grad_bw, grad_bb = backbone.backward(activations, probs @ weights)
            step = lr / batch.size
            weights -= step * grad_w
            bias -= step * grad_b
            for w, g in zip(backbone.weights, grad_bw):
                w -= step * g
            for b, g in zip(backbone.biases, grad_bb):
                b -= step * g
        logits = backbone.encode(features) @ weights.T + bias
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        objective = float(
            -cfg.data_weight * log_p[np.arange(n), labels].sum()
            + cfg.l2_penalty * ((weights ** 2).sum() + (bias ** 2).sum())
        )
        if not math.isfinite(objective):
            raise TrainingFailureError("baseline training diverged", epoch=epoch)
        model.loss_trajectory.append(objective)
    return model


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in _TRUE:
        return True
    if low in _FALSE:
        return False
    raise InvalidArgumentError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in str(text).split(",") if p.strip())


def _parse_opt_int(text: str):
    low = str(text).strip().lower()
    return None if low in ("", "none", "auto") else int(text)


# key -> (converter, help text); this single table drives the config-file
# parser, the config echo, and the CLI flag registration.
CONFIG_FIELDS: dict[str, tuple] = {
    "dataset": (str, "'synthetic' or a path to a feature CSV"),
    "taxonomy": (lambda s: None if str(s).lower() in ("", "none") else str(s),
                 "taxonomy TSV path (required for semantic mode on file datasets)"),
    "out": (str, "output directory"),
    "seed": (int, "master seed; stage seeds derive from it"),
    "figures": (_parse_bool, "render PNG figures next to the CSV outputs"),
    "synth_categories": (int, "synthetic: number of categories"),
    "synth_classes_per_category": (int, "synthetic: classes per category"),
    "synth_dim": (int, "synthetic: feature dimension"),
    "synth_samples_per_class": (int, "synthetic: samples per class"),
    "synth_category_spread": (float, "synthetic: spread of category centers"),
    "synth_class_spread": (float, "synthetic: spread of class centers"),
    "train_fraction": (float, "per-class train fraction for synthetic data"),
    "ontology_mode": (str, "'semantic' (taxonomy) or 'visual' (feature kernel)"),
    "categories": (_parse_opt_int, "category count k ('auto' sizes it to the group size)"),
    "assignment": (str, "'tree' (ontology order) or 'random'"),
    "group_size": (int, "classes per task group"),
    "overlap": (float, "inter-group overlap fraction in [0, 1)"),
    "epochs": (int, "expert training epochs"),
    "learning_rate": (float, "expert learning rate"),
    "lr_decay": (float, "expert per-epoch learning-rate decay"),
    "batch_size": (int, "expert mini-batch size"),
    "data_weight": (float, "weight of the cross-entropy term"),
    "l2_penalty": (float, "ridge penalty on head weights"),
    "laplacian_penalty": (float, "similarity-coupling penalty on member weights"),
    "sim_refresh_period": (int, "epochs between similarity refreshes"),
    "samples_per_class": (_parse_opt_int, "training samples drawn per member class ('none' = all)"),
    "hidden_dims": (_parse_int_tuple, "encoder widths, e.g. '64,32' ('' = identity encoder)"),
    "variant": (str, "stacking rule: 'odds' or 'scaled'"),
    "fusion": (str, "'late' (stacking) or 'early' (concatenated encodings)"),
    "head_epochs": (int, "fused-head training epochs"),
    "head_learning_rate": (float, "fused-head learning rate"),
    "head_lr_decay": (float, "fused-head learning-rate decay"),
    "head_batch_size": (int, "fused-head mini-batch size"),
    "refine_experts": (_parse_bool, "backpropagate the fused-head error into expert heads"),
    "refine_learning_rate": (float, "refinement learning rate"),
    "refine_epochs": (int, "refinement epochs"),
    "ks": (_parse_int_tuple, "top-k cutoffs to report, e.g. '1,5,10'"),
}


@dataclass
class ExperimentConfig:
    """Everything one pipeline run needs; mirrors the flat config-file keys."""

    dataset: str = "synthetic"
    taxonomy: str | None = None
    out: str = "runs/latest"
    seed: int = 0
    figures: bool = True
    synth_categories: int = 8
    synth_classes_per_category: int = 5
    synth_dim: int = 16
    synth_samples_per_class: int = 30
    synth_category_spread: float = 10.0
    synth_class_spread: float = 1.0
    train_fraction: float = 0.8
    ontology_mode: str = "semantic"
    categories: int | None = None
    assignment: str = "tree"
    group_size: int = 10
    overlap: float = 0.5
    epochs: int = 100
    learning_rate: float = 1.0
    lr_decay: float = 0.995
    batch_size: int = 32
    data_weight: float = 1.0
    l2_penalty: float = 0.3
    laplacian_penalty: float = 0.1
    sim_refresh_period: int = 5
    samples_per_class: int | None = None
    hidden_dims: tuple[int, ...] = (64, 32)
    variant: str = "odds"
    fusion: str = "late"
    head_epochs: int = 150
    head_learning_rate: float = 0.5
    head_lr_decay: float = 0.99
    head_batch_size: int = 64
    refine_experts: bool = False
    refine_learning_rate: float = 0.02
    refine_epochs: int = 5
    ks: tuple[int, ...] = (1, 5, 10)

    def validate(self) -> None:
        if self.ontology_mode not in ("semantic", "visual"):
            raise InvalidArgumentError(f"unknown ontology_mode {self.ontology_mode!r}")
        if self.assignment not in ("tree", "random"):
            raise InvalidArgumentError(f"unknown assignment {self.assignment!r}")
        if self.variant not in fusion_mod.VARIANTS:
            raise InvalidArgumentError(f"unknown variant {self.variant!r}")
        if self.fusion not in ("late", "early"):
            raise InvalidArgumentError(f"unknown fusion {self.fusion!r}")
        if not self.ks or list(self.ks) != sorted(self.ks) or self.ks[0] < 1:
            raise InvalidArgumentError("ks must be ascending and >= 1")
        if not 0.0 <= self.overlap < 1.0:
            raise InvalidArgumentError("overlap must be in [0, 1)")

    # -- derived stage seeds -------------------------------------------

    def stage_seeds(self) -> dict[str, int]:
        return {
            "master": self.seed,
            "data": self.seed,
            "ontology": self.seed + 101,
            "grouping": self.seed + 202,
            "experts": self.seed + 303,
            "head": self.seed + 404,
        }

    def train_config(self, expert_index: int = 0) -> TrainConfig:
        return TrainConfig(
            data_weight=self.data_weight,
            l2_penalty=self.l2_penalty,
            laplacian_penalty=self.laplacian_penalty,
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            sim_refresh_period=self.sim_refresh_period,
            samples_per_class=self.samples_per_class,
            hidden_dims=tuple(self.hidden_dims),
            kernel=KernelConfig(seed=self.stage_seeds()["ontology"]),
            seed=self.stage_seeds()["experts"] + expert_index,
        )

    def head_config(self) -> HeadConfig:
        return HeadConfig(
            learning_rate=self.head_learning_rate,
            lr_decay=self.head_lr_decay,
            epochs=self.head_epochs,
            batch_size=self.head_batch_size,
            seed=self.stage_seeds()["head"],
            refine_experts=self.refine_experts,
            refine_learning_rate=self.refine_learning_rate,
            refine_epochs=self.refine_epochs,
        )

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_categories=self.synth_categories,
            classes_per_category=self.synth_classes_per_category,
            dim=self.synth_dim,
            samples_per_class=self.synth_samples_per_class,
            category_spread=self.synth_category_spread,
            class_spread=self.synth_class_spread,
            seed=self.stage_seeds()["data"],
            train_fraction=self.train_fraction,
        )

    # -- (de)serialization ----------------------------------------------

    def to_mapping(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["hidden_dims"] = list(self.hidden_dims)
        doc["ks"] = list(self.ks)
        return doc

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        cfg = cls()
        for key, value in mapping.items():
            if key not in CONFIG_FIELDS:
                raise InvalidArgumentError(f"unknown config key {key!r}")
            converter = CONFIG_FIELDS[key][0]
            setattr(cfg, key, converter(value) if isinstance(value, str) else value)
        cfg.hidden_dims = tuple(cfg.hidden_dims)
        cfg.ks = tuple(cfg.ks)
        cfg.validate()
        return cfg

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_mapping(), sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def parse_config_file(path) -> dict:
    """Read the flat ``key = value`` config format (``#`` starts a comment)."""
    mapping: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParseError("expected 'key = value'", line=lineno)
            key, value = line.split("=", 1)
            key = key.strip()
            if key not in CONFIG_FIELDS:
                raise ParseError(f"unknown config key {key!r}", line=lineno)
            mapping[key] = value.strip()
    return mapping


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class Report:
    """Metrics and provenance of one pipeline run."""

    config: dict
    config_hash: str
    seeds: dict
    n_classes: int
    n_groups: int | None
    topk: dict[int, float]
    per_class: list[float]
    timings: dict[str, float]
    method: str = "mixture"

    def validate(self) -> None:
        values = [self.topk[k] for k in sorted(self.topk)]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise InvalidArgumentError("accuracies must lie in [0, 1]")
        if any(b < a - 1e-12 for a, b in zip(values, values[1:])):
            raise InvalidArgumentError("top-k accuracy must be non-decreasing in k")

    def to_json_dict(self) -> dict:
        return {
            "format_version": REPORT_VERSION,
            "method": self.method,
            "config": self.config,
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "n_classes": self.n_classes,
            "n_groups": self.n_groups,
            "metrics": {
                "topk": {str(k): v for k, v in sorted(self.topk.items())},
                "per_class": list(self.per_class),
            },
            "timings": self.timings,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_json_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def _write_per_class_csv(path, by_class: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["class_id", "top1_accuracy"])
        for class_id, acc in enumerate(by_class):
            writer.writerow([class_id, repr(float(acc))])


def _write_predictions_csv(path, order: np.ndarray, scores: np.ndarray, depth: int) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sample_id", "rank", "class_id", "score"])
        for sample_id in range(order.shape[0]):
            for rank in range(depth):
                writer.writerow([
                    sample_id, rank + 1,
                    int(order[sample_id, rank]),
                    repr(float(scores[sample_id, rank])),
                ])


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def _stage(timings: dict, name: str):
    class _Timer:
        def __enter__(self):
            self.start = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = time.perf_counter() - self.start
            if exc is not None and not isinstance(exc, PipelineStageError):
                raise PipelineStageError(name, exc) from exc
            return False

    return _Timer()


def load_pipeline_dataset(cfg: ExperimentConfig):
    """Resolve the configured dataset source to (dataset, taxonomy or None)."""
    if cfg.dataset == "synthetic":
        return generate_synthetic(cfg.synth_spec())
    dataset = load_features(cfg.dataset)
    tree = None
    if cfg.taxonomy:
        tree = TaxonomyTree.from_tsv(cfg.taxonomy)
        if tree.n_classes != dataset.n_classes:
            raise InvalidDatasetError(
                f"taxonomy has {tree.n_classes} classes, dataset has {dataset.n_classes}"
            )
    return dataset, tree


def build_affinity(cfg: ExperimentConfig, dataset: Dataset, tree: TaxonomyTree | None) -> AffinityMatrix:
    if cfg.ontology_mode == "semantic":
        if tree is None:
            raise InvalidArgumentError(
                "semantic ontology mode needs a taxonomy (synthetic data provides one)"
            )
        return build_semantic_matrix(tree)
    return visual_affinity_matrix(dataset, KernelConfig(seed=cfg.stage_seeds()["ontology"]))


def auto_category_count(aff: AffinityMatrix, group_size: int, seed: int) -> int:
    """Smallest k (from n/group_size upward) whose largest category fits a group."""
    n = aff.n
    k = max(1, -(-n // group_size))
    while k < n:
        sizes = [len(cat) for cat in build_two_layer_ontology(aff, k, seed).categories]
        if max(sizes) <= group_size:
            break
        k += 1
    return k


def run_pipeline(cfg: ExperimentConfig) -> Report:
    """Execute every stage and write the run artifacts under ``cfg.out``."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = cfg.stage_seeds()
    timings: dict[str, float] = {}

    with _stage(timings, "dataset"):
        dataset, tree = load_pipeline_dataset(cfg)
        if cfg.dataset == "synthetic":
            save_features(dataset, out / "dataset.csv")
            tree.to_tsv(out / "taxonomy.tsv")

    order = None
    if cfg.assignment == "tree":
        with _stage(timings, "ontology"):
            aff = build_affinity(cfg, dataset, tree)
            k = cfg.categories or auto_category_count(aff, cfg.group_size, seeds["ontology"])
            onto = build_two_layer_ontology(aff, k, seeds["ontology"])
            onto.save(out / "ontology.json")
            order = onto.leaf_order

    with _stage(timings, "grouping"):
        if cfg.assignment == "tree":
            plan = generate_groups(order, cfg.group_size, cfg.overlap)
        else:
            plan = random_groups(range(dataset.n_classes), cfg.group_size,
                                 cfg.overlap, seeds["grouping"])
        plan.save(out / "plan.json")

    with _stage(timings, "experts"):
        experts = [train_expert(group, dataset, cfg.train_config(group.index))
                   for group in plan.groups]

    with _stage(timings, "fusion"):
        if cfg.fusion == "late":
            model = train_stacking_head(experts, plan, dataset, cfg.variant, cfg.head_config())
            fusion_mod.save_mixture(model, out / "mixture.json")
        else:
            model = early_fusion_train(experts, dataset, cfg.head_config())
            fusion_mod.save_early_fusion(model, out / "early_fusion.json")

    with _stage(timings, "evaluation"):
        test_features = dataset.features[dataset.test_idx]
        test_labels = dataset.labels[dataset.test_idx]
        ranked, scores = rank_matrix(model, test_features)
        topk = {k: topk_accuracy(ranked, test_labels, k) for k in cfg.ks}
        by_class, curve = per_class_accuracy(ranked, test_labels, dataset.n_classes)
        _write_per_class_csv(out / "per_class.csv", by_class)
        _write_predictions_csv(out / "predictions.csv", ranked, scores, max(cfg.ks))
        if cfg.figures:
            plots.save_per_class_curve(curve, out / "per_class.png")

    with _stage(timings, "report"):
        report = Report(
            config=cfg.to_mapping(),
            config_hash=cfg.config_hash(),
            seeds=seeds,
            n_classes=dataset.n_classes,
            n_groups=plan.theta,
            topk=topk,
            per_class=[float(v) for v in by_class],
            timings=timings,
        )
        report.validate()
        report.save(out / "report.json")
    return report


def run_monolithic(cfg: ExperimentConfig) -> Report:
    """Train and evaluate the single-softmax baseline under the same config."""
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    with _stage(timings, "dataset"):
        dataset, _ = load_pipeline_dataset(cfg)
    with _stage(timings, "baseline"):
        model = train_monolithic(dataset, cfg.train_config())
    with _stage(timings, "evaluation"):
        ranked, _ = model.rank(dataset.features[dataset.test_idx])
        test_labels = dataset.labels[dataset.test_idx]
        topk = {k: topk_accuracy(ranked, test_labels, k) for k in cfg.ks}
        by_class, _curve = per_class_accuracy(ranked, test_labels, dataset.n_classes)
    report = Report(
        config=cfg.to_mapping(),
        config_hash=cfg.config_hash(),
        seeds=cfg.stage_seeds(),
        n_classes=dataset.n_classes,
        n_groups=None,
        topk=topk,
        per_class=[float(v) for v in by_class],
        timings=timings,
        method="monolithic",
    )
    report.validate()
    report.save(out / "report.json")
    return report


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationGrid:
    """Which cells to sweep; ``None`` in ``laplacian_penalties`` keeps the default."""

    assignments: tuple[str, ...] = ("tree", "random")
    overlaps: tuple[float, ...] = (0.0, 0.25, 0.5)
    variants: tuple[str, ...] = ("odds",)
    fusions: tuple[str, ...] = ("late",)
    laplacian_penalties: tuple[float | None, ...] = (None,)
    seeds: tuple[int, ...] = ()
    include_baseline: bool = True


def _cell_name(assignment, overlap, variant, fusion, lap) -> str:
    lap_tag = "default" if lap is None else format(lap, "g")
    return f"{assignment}_ov{overlap:g}_{variant}_{fusion}_lap{lap_tag}"


def run_ablation(base_cfg: ExperimentConfig, grid: AblationGrid) -> list[dict]:
    """Run every grid cell (and the baseline) per seed; merge results to CSV.

    Failed cells are recorded with their error and do not stop the sweep.
    Returns the merged table rows.
    """
    base_cfg.validate()
    out = Path(base_cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = grid.seeds or (base_cfg.seed,)
    rows: list[dict] = []

    def _row(report: Report | None, method, assignment, overlap, variant, fusion, lap, seed, error=None):
        row = {
            "status": "ok" if report else "failed",
            "method": method,
            "assignment": assignment,
            "lambda": "" if overlap is None else overlap,
            "n_groups": report.n_groups if report else "",
            "variant": variant or "",
            "fusion": fusion or "",
            "laplacian_penalty": "" if lap is None else lap,
            "seed": seed,
            "config_hash": report.config_hash if report else "",
            "error": "" if error is None else str(error),
        }
        for k in base_cfg.ks:
            row[f"top{k}"] = report.topk[k] if report else ""
        return row

    for seed in seeds:
        for assignment, overlap, variant, fusion, lap in itertools.product(
            grid.assignments, grid.overlaps, grid.variants, grid.fusions,
            grid.laplacian_penalties,
        ):
            cell_dir = out / _cell_name(assignment, overlap, variant, fusion, lap) / f"seed{seed}"
            cfg = dataclasses.replace(
                base_cfg,
                assignment=assignment,
                overlap=overlap,
                variant=variant,
                fusion=fusion,
                laplacian_penalty=base_cfg.laplacian_penalty if lap is None else lap,
                seed=seed,
                out=str(cell_dir),
                figures=False,
            )
            try:
                report = run_pipeline(cfg)
                rows.append(_row(report, "mixture", assignment, overlap, variant, fusion, lap, seed))
            except ExpertMixError as exc:
                rows.append(_row(None, "mixture", assignment, overlap, variant, fusion, lap, seed, exc))
        if grid.include_baseline:
            cfg = dataclasses.replace(
                base_cfg, seed=seed, out=str(out / "monolithic" / f"seed{seed}"), figures=False
            )
            try:
                report = run_monolithic(cfg)
                rows.append(_row(report, "monolithic", "", None, "", "", None, seed))
            except ExpertMixError as exc:
                rows.append(_row(None, "monolithic", "", None, "", "", None, seed, exc))

    _write_ablation_csv(out / "ablation.csv", rows, base_cfg.ks)
    _write_sweep_plot_data(out, rows, base_cfg, grid)
    return rows


def _write_ablation_csv(path, rows: list[dict], ks) -> None:
    fields = ["status", "method", "assignment", "lambda", "n_groups", "variant",
              "fusion", "laplacian_penalty", "seed", "config_hash"]
    fields += [f"top{k}" for k in ks] + ["error"]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def _write_sweep_plot_data(out: Path, rows: list[dict], cfg: ExperimentConfig,
                           grid: AblationGrid) -> None:
    """Emit accuracy-versus-overlap and accuracy-versus-expert-count tables."""
    reference = [r for r in rows if r["status"] == "ok" and r["method"] == "mixture"
                 and r["assignment"] == "tree" and r["fusion"] == "late"
                 and r["variant"] == grid.variants[0]
                 and r["laplacian_penalty"] == ""]
    if not reference:
        return
    by_overlap: dict[float, list[dict]] = {}
    for row in reference:
        by_overlap.setdefault(float(row["lambda"]), []).append(row)
    table = []
    for overlap in sorted(by_overlap):
        cell_rows = by_overlap[overlap]
        entry = {"lambda": overlap, "n_groups": cell_rows[0]["n_groups"]}
        for k in cfg.ks:
            entry[f"top{k}_mean"] = float(np.mean([r[f"top{k}"] for r in cell_rows]))
        table.append(entry)

    for file_name, x_key in (("accuracy_vs_lambda.csv", "lambda"),
                             ("accuracy_vs_theta.csv", "n_groups")):
        with open(out / file_name, "w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow([x_key] + [f"top{k}_mean" for k in cfg.ks])
            for entry in table:
                writer.writerow([entry[x_key]] + [repr(entry[f"top{k}_mean"]) for k in cfg.ks])

    if cfg.figures:
        xs_lambda = [entry["lambda"] for entry in table]
        xs_theta = [entry["n_groups"] for entry in table]
        series = {f"top-{k}": [entry[f"top{k}_mean"] for entry in table] for k in cfg.ks}
        plots.save_metric_curve(xs_lambda, series, "inter-group overlap",
                                out / "accuracy_vs_lambda.png")
        plots.save_metric_curve(xs_theta, series, "number of experts",
                                out / "accuracy_vs_theta.png")
