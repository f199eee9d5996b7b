"""Command-line interface.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines) plus
one flag per config key; explicit flags override file values, which override
the built-in defaults. Exit status is 0 on success and 1 on any failure,
with a stage-tagged diagnostic on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import fusion as fusion_mod
from .dataset import save_features
from .errors import ExpertMixError, InvalidArgumentError, PipelineStageError
from .expert import load_expert, train_expert
from .harness import (
    CONFIG_FIELDS,
    AblationGrid,
    ExperimentConfig,
    Report,
    build_affinity,
    auto_category_count,
    load_pipeline_dataset,
    parse_config_file,
    per_class_accuracy,
    run_ablation,
    run_pipeline,
    topk_accuracy,
)
from .ontology import TwoLayerOntology, build_two_layer_ontology
from .taskgroups import GroupingPlan, generate_groups, random_groups
from . import plots


def _add_config_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="FILE", help="flat key=value config file")
    for key, (_conv, help_text) in CONFIG_FIELDS.items():
        sub.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}",
                         metavar="V", help=help_text)


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(parse_config_file(args.config))
    for key in CONFIG_FIELDS:
        value = getattr(args, f"cfg_{key}", None)
        if value is not None:
            mapping[key] = value
    return ExperimentConfig.from_mapping(mapping)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    dataset, tree = load_pipeline_dataset(cfg)
    save_features(dataset, out / "dataset.csv")
    if tree is not None:
        tree.to_tsv(out / "taxonomy.tsv")
    print(f"wrote {out / 'dataset.csv'} ({dataset.n_samples} samples, "
          f"{dataset.n_classes} classes, dim {dataset.dim})")
    return 0


def _cmd_ontology(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    dataset, tree = load_pipeline_dataset(cfg)
    aff = build_affinity(cfg, dataset, tree)
    k = cfg.categories or auto_category_count(aff, cfg.group_size, cfg.stage_seeds()["ontology"])
    onto = build_two_layer_ontology(aff, k, cfg.stage_seeds()["ontology"])
    onto.save(out / "ontology.json")
    if args.affinity_out:
        aff.to_csv(args.affinity_out)
    print(f"wrote {out / 'ontology.json'} ({k} categories over {aff.n} classes)")
    return 0


def _cmd_assign(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    if cfg.assignment == "tree":
        onto_path = Path(args.ontology) if args.ontology else out / "ontology.json"
        onto = TwoLayerOntology.load(onto_path)
        plan = generate_groups(onto.leaf_order, cfg.group_size, cfg.overlap)
    else:
        dataset, _ = load_pipeline_dataset(cfg)
        plan = random_groups(range(dataset.n_classes), cfg.group_size, cfg.overlap,
                             cfg.stage_seeds()["grouping"])
    plan.save(out / "plan.json")
    print(f"wrote {out / 'plan.json'} ({plan.theta} groups of {plan.group_size}, "
          f"stride {plan.stride})")
    return 0


def _cmd_train_experts(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    plan = GroupingPlan.load(Path(args.plan) if args.plan else out / "plan.json")
    dataset, _ = load_pipeline_dataset(cfg)
    from .expert import save_expert

    for group in plan.groups:
        model = train_expert(group, dataset, cfg.train_config(group.index))
        save_expert(model, out / f"expert_{group.index:03d}.json")
        print(f"trained expert {group.index} "
              f"(final objective {model.loss_trajectory[-1]:.4f})")
    return 0


def _load_experts(plan: GroupingPlan, experts_dir: Path):
    experts = []
    for group in plan.groups:
        path = experts_dir / f"expert_{group.index:03d}.json"
        if not path.exists():
            raise InvalidArgumentError(f"missing expert checkpoint {path}")
        experts.append(load_expert(path))
    return experts


def _cmd_fuse(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    plan = GroupingPlan.load(Path(args.plan) if args.plan else out / "plan.json")
    experts_dir = Path(args.experts_dir) if args.experts_dir else out
    experts = _load_experts(plan, experts_dir)
    dataset, _ = load_pipeline_dataset(cfg)
    if cfg.fusion == "late":
        model = fusion_mod.train_stacking_head(experts, plan, dataset,
                                               cfg.variant, cfg.head_config())
        fusion_mod.save_mixture(model, out / "mixture.json")
        print(f"wrote {out / 'mixture.json'}")
    else:
        model = fusion_mod.early_fusion_train(experts, dataset, cfg.head_config())
        fusion_mod.save_early_fusion(model, out / "early_fusion.json")
        print(f"wrote {out / 'early_fusion.json'}")
    return 0


def _load_fused_model(path: Path):
    with open(path, "r", encoding="utf-8") as handle:
        doc = json.load(handle)
    if "plan" in doc:
        return fusion_mod.load_mixture(path)
    return fusion_mod.load_early_fusion(path)


def _cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(cfg)
    model_path = Path(args.model) if args.model else out / "mixture.json"
    model = _load_fused_model(model_path)
    dataset, _ = load_pipeline_dataset(cfg)
    ranked, scores = fusion_mod.rank_matrix(model, dataset.features[dataset.test_idx])
    labels = dataset.labels[dataset.test_idx]
    topk = {k: topk_accuracy(ranked, labels, k) for k in cfg.ks}
    by_class, curve = per_class_accuracy(ranked, labels, dataset.n_classes)

    from .harness import _write_per_class_csv, _write_predictions_csv

    _write_per_class_csv(out / "per_class.csv", by_class)
    _write_predictions_csv(out / "predictions.csv", ranked, scores, max(cfg.ks))
    if cfg.figures:
        plots.save_per_class_curve(curve, out / "per_class.png")
    report = Report(
        config=cfg.to_mapping(),
        config_hash=cfg.config_hash(),
        seeds=cfg.stage_seeds(),
        n_classes=dataset.n_classes,
        n_groups=getattr(getattr(model, "plan", None), "theta", None),
        topk=topk,
        per_class=[float(v) for v in by_class],
        timings={},
        method="eval",
    )
    report.validate()
    report.save(out / "report.json")
    print("  ".join(f"top-{k}: {v:.4f}" for k, v in sorted(topk.items())))
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _config_from_args(args)
    report = run_pipeline(cfg)
    print("  ".join(f"top-{k}: {v:.4f}" for k, v in sorted(report.topk.items())))
    print(f"report: {Path(cfg.out) / 'report.json'}")
    return 0


def _parse_grid_list(text: str, conv):
    return tuple(conv(part) for part in text.split(",") if part.strip())


def _cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    grid = AblationGrid(
        assignments=_parse_grid_list(args.grid_assignments, str),
        overlaps=_parse_grid_list(args.grid_overlaps, float),
        variants=_parse_grid_list(args.grid_variants, str),
        fusions=_parse_grid_list(args.grid_fusions, str),
        laplacian_penalties=tuple(
            None if p in ("default", "") else float(p)
            for p in args.grid_laplacians.split(",") if p.strip()
        ),
        seeds=_parse_grid_list(args.grid_seeds, int) if args.grid_seeds else (),
        include_baseline=not args.no_baseline,
    )
    rows = run_ablation(cfg, grid)
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"{ok}/{len(rows)} cells succeeded; table: {Path(cfg.out) / 'ablation.csv'}")
    return 0 if ok == len(rows) else 1


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertmix",
        description="Overlapping task-group experts fused into one large-vocabulary classifier",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    specs = [
        ("gen-data", _cmd_gen_data, "generate a synthetic dataset and its taxonomy"),
        ("ontology", _cmd_ontology, "build the two-layer ontology and leaf order"),
        ("assign", _cmd_assign, "generate the task-group plan"),
        ("train-experts", _cmd_train_experts, "train one expert per task group"),
        ("fuse", _cmd_fuse, "fit the fusion stage on trained experts"),
        ("eval", _cmd_eval, "evaluate a fused model on the test split"),
        ("pipeline", _cmd_pipeline, "run every stage end to end"),
        ("ablate", _cmd_ablate, "run the comparison grid and merge results"),
    ]
    for name, handler, help_text in specs:
        sub = subs.add_parser(name, help=help_text)
        _add_config_flags(sub)
        sub.set_defaults(handler=handler)
        if name == "ontology":
            sub.add_argument("--affinity-out", metavar="CSV",
                             help="also export the affinity matrix")
        if name == "assign":
            sub.add_argument("--ontology", metavar="JSON",
                             help="ontology file (default: <out>/ontology.json)")
        if name in ("train-experts", "fuse"):
            sub.add_argument("--plan", metavar="JSON",
                             help="plan file (default: <out>/plan.json)")
        if name == "fuse":
            sub.add_argument("--experts-dir", metavar="DIR",
                             help="directory of expert checkpoints (default: <out>)")
        if name == "eval":
            sub.add_argument("--model", metavar="JSON",
                             help="mixture or early-fusion checkpoint (default: <out>/mixture.json)")
        if name == "ablate":
            sub.add_argument("--grid-assignments", default="tree,random", metavar="LIST")
            sub.add_argument("--grid-overlaps", default="0,0.25,0.5", metavar="LIST")
            sub.add_argument("--grid-variants", default="odds", metavar="LIST")
            sub.add_argument("--grid-fusions", default="late", metavar="LIST")
            sub.add_argument("--grid-laplacians", default="default", metavar="LIST",
                             help="values or 'default' (comma separated)")
            sub.add_argument("--grid-seeds", default="", metavar="LIST")
            sub.add_argument("--no-baseline", action="store_true",
                             help="skip the monolithic baseline")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except PipelineStageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except ExpertMixError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
