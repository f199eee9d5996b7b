"""Command-line interface: subcommands, config precedence, exit codes."""

import json

import pytest

from expertmix.cli import main


def run_cli(*args):
    return main(list(args))


COMMON = [
    "--synth-categories", "2",
    "--synth-classes-per-category", "2",
    "--synth-dim", "4",
    "--synth-samples-per-class", "12",
    "--group-size", "2",
    "--overlap", "0.5",
    "--epochs", "20",
    "--learning-rate", "0.5",
    "--lr-decay", "0.98",
    "--head-epochs", "30",
    "--ks", "1,2",
    "--seed", "1",
    "--figures", "false",
]


def test_gen_data(tmp_path, capsys):
    out = tmp_path / "data"
    assert run_cli("gen-data", "--out", str(out), *COMMON) == 0
    assert (out / "dataset.csv").exists()
    assert (out / "taxonomy.tsv").exists()
    assert "40 samples" in capsys.readouterr().out


def test_staged_workflow(tmp_path, capsys):
    out = tmp_path / "staged"
    args = ["--out", str(out), *COMMON]
    assert run_cli("ontology", *args, "--affinity-out", str(out / "aff.csv")) == 0
    assert (out / "ontology.json").exists()
    assert (out / "aff.csv").exists()
    assert run_cli("assign", *args) == 0
    plan = json.loads((out / "plan.json").read_text(encoding="utf-8"))
    assert len(plan["groups"]) == 4
    assert run_cli("train-experts", *args) == 0
    for index in range(4):
        assert (out / f"expert_{index:03d}.json").exists()
    assert run_cli("fuse", *args) == 0
    assert (out / "mixture.json").exists()
    assert run_cli("eval", *args) == 0
    assert (out / "report.json").exists()
    assert (out / "predictions.csv").exists()
    assert "top-1" in capsys.readouterr().out


def test_pipeline_command(tmp_path, capsys):
    out = tmp_path / "pipe"
    assert run_cli("pipeline", "--out", str(out), *COMMON) == 0
    report = json.loads((out / "report.json").read_text(encoding="utf-8"))
    assert report["n_groups"] == 4
    assert "report:" in capsys.readouterr().out


def test_pipeline_with_config_file_and_override(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "synth_categories = 2\n"
        "synth_classes_per_category = 2\n"
        "synth_dim = 4\n"
        "synth_samples_per_class = 12\n"
        "group_size = 2\n"
        "overlap = 0.0\n"
        "epochs = 15\n"
        "head_epochs = 20\n"
        "ks = 1,2\n"
        "figures = false\n"
        f"out = {tmp_path / 'file_run'}\n",
        encoding="utf-8",
    )
    # flag overrides the file's overlap (0.0 -> 0.5 gives 4 groups, not 2)
    assert run_cli("pipeline", "--config", str(cfg_file), "--overlap", "0.5") == 0
    report = json.loads((tmp_path / "file_run" / "report.json").read_text(encoding="utf-8"))
    assert report["config"]["overlap"] == 0.5
    assert report["n_groups"] == 4


def test_ablate_command(tmp_path, capsys):
    out = tmp_path / "ablate"
    code = run_cli(
        "ablate", "--out", str(out), *COMMON,
        "--grid-assignments", "tree",
        "--grid-overlaps", "0,0.5",
        "--grid-variants", "odds",
        "--grid-fusions", "late",
        "--grid-seeds", "1",
    )
    assert code == 0
    assert (out / "ablation.csv").exists()
    text = (out / "ablation.csv").read_text(encoding="utf-8")
    assert text.count("\nok") + text.count("\n") >= 3
    assert "cells succeeded" in capsys.readouterr().out


def test_eval_missing_model_fails(tmp_path, capsys):
    out = tmp_path / "missing"
    code = run_cli("eval", "--out", str(out), *COMMON)
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_stage_tagged_failure(tmp_path, capsys):
    # a file dataset without a taxonomy cannot build the semantic ontology
    out = tmp_path / "tagged"
    assert run_cli("gen-data", "--out", str(out), *COMMON) == 0
    code = run_cli("pipeline", "--out", str(out / "run"), *COMMON,
                   "--dataset", str(out / "dataset.csv"))
    assert code == 1
    err = capsys.readouterr().err
    assert "error [ontology]" in err


def test_unknown_config_key_in_file(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("group_sise = 2\n", encoding="utf-8")
    assert run_cli("pipeline", "--config", str(bad)) == 1
    assert "error" in capsys.readouterr().err
