"""End-to-end tests for the command-line interface.

The workflow test drives the real commands in-process at miniature scale:
synthetic data, a few-shot split, all three training stages, evaluation,
proposal dumps, and plots, asserting on the files each command promises.
"""

from __future__ import annotations

import json

import pytest
import yaml
from click.testing import CliRunner

from ledet.cli import main
from ledet.data import FewShotSplit, load_coco_json

TINY_CFG = {
    "dataset": {
        "synth_train_images": 16,
        "synth_test_images": 4,
        "synth_canvas": 48,
        "synth_objects": [1, 2],
        "synth_size_range": [10, 18],
    },
    "split": {
        "base_class_ids": [1, 2],
        "novel_class_ids": [3, 4],
        "k": 2,
        "labeled_percent": 40.0,
    },
    "augment": {"resize_short_edge": [40, 56], "test_short_edge": 48},
    "detector": {
        "num_foreground_classes": 2,
        "base_channels": 4,
        "fpn_channels": 8,
        "roi_pool_size": 2,
        "roi_hidden": 16,
        "rpn_pre_nms": 128,
        "rpn_post_nms": 32,
        "rpn_batch_per_image": 16,
        "roi_batch_per_image": 16,
        "top_n_proposals": 32,
    },
    "schedule": {
        "batch_labeled": 2,
        "batch_unlabeled": 2,
        "total_iterations": 2,
        "milestones": [],
        "novel_head_iterations": 1,
        "finetune_iterations": 1,
    },
    "entreg": {"pair_top_n": 8},
}


@pytest.fixture()
def runner():
    return CliRunner()


def write_cfg(tmp_path, extra=None):
    cfg = json.loads(json.dumps(TINY_CFG))
    cfg["output_dir"] = str(tmp_path / "runs")
    for key, value in (extra or {}).items():
        section, _, name = key.partition(".")
        cfg.setdefault(section, {})[name] = value
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(runner, args):
    result = runner.invoke(main, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


def test_unknown_override_key_exits_nonzero(runner):
    result = runner.invoke(main, ["split", "--set", "schedule.batch=4"])
    assert result.exit_code != 0
    assert "schedule.batch" in result.output


def test_bad_override_value_exits_nonzero(runner):
    result = runner.invoke(main, ["split", "--set", "schedule.lr=hello"])
    assert result.exit_code != 0
    assert "schedule.lr" in result.output


def test_unknown_profile_exits_nonzero(runner):
    result = runner.invoke(main, ["synth", "--profile", "nope"])
    assert result.exit_code != 0
    assert "profile" in result.output


def test_invalid_config_value_reports_key_path(runner, tmp_path):
    cfg = write_cfg(tmp_path, {"split.labeled_percent": 250.0})
    result = runner.invoke(main, ["synth", "--config", str(cfg)])
    assert result.exit_code != 0
    assert "split.labeled_percent" in result.output


def test_seed_override_lands_in_resolved_config(runner, tmp_path):
    cfg = write_cfg(tmp_path)
    invoke(runner, ["synth", "--config", str(cfg), "--seed", "7"])
    resolved = yaml.safe_load(
        (tmp_path / "runs" / "data" / "resolved_config.yaml").read_text())
    assert resolved["seed"] == 7
    assert resolved["dataset"]["synth_train_images"] == 16


def test_output_root_env_reroots_relative_dirs(runner, tmp_path, monkeypatch):
    monkeypatch.setenv("LEDET_OUTPUT_ROOT", str(tmp_path / "elsewhere"))
    cfg = write_cfg(tmp_path)
    invoke(runner, ["synth", "--config", str(cfg),
                    "--output-dir", "runs/exp"])
    assert (tmp_path / "elsewhere" / "runs" / "exp" / "data" / "train.json").exists()


def test_finetune_without_split_exits_nonzero(runner, tmp_path):
    cfg = write_cfg(tmp_path)
    invoke(runner, ["synth", "--config", str(cfg)])
    result = runner.invoke(main, ["finetune", "--config", str(cfg)])
    assert result.exit_code != 0
    assert "split" in result.output


def test_eval_requires_checkpoint(runner):
    result = runner.invoke(main, ["eval"])
    assert result.exit_code != 0


def test_plot_requires_an_input(runner, tmp_path):
    cfg = write_cfg(tmp_path)
    result = runner.invoke(main, ["plot", "--config", str(cfg)])
    assert result.exit_code != 0
    assert "--metrics" in result.output


def test_full_workflow(runner, tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "runs"
    data = out / "data"

    invoke(runner, ["synth", "--config", str(cfg)])
    assert (data / "train.json").exists()
    assert (data / "test.json").exists()
    index = load_coco_json(data / "train.json")
    assert len(index.image_ids) == 16
    assert set(index.categories) == {1, 2, 3, 4}

    invoke(runner, ["split", "--config", str(cfg)])
    split = FewShotSplit.load(out / "split.json")
    assert split.k == 2
    assert set(split.shot_instances) == {1, 2, 3, 4}

    invoke(runner, ["pretrain", "--config", str(cfg)])
    base_ckpt = out / "checkpoint_base_pretrain.ckpt"
    assert base_ckpt.exists()
    assert (out / "metrics_base_pretrain.csv").exists()
    assert (out / "resolved_config.yaml").exists()

    invoke(runner, ["finetune", "--config", str(cfg)])
    final_ckpt = out / "checkpoint_balanced_finetune.ckpt"
    assert (out / "checkpoint_novel_head.ckpt").exists()
    assert final_ckpt.exists()

    result = invoke(runner, ["eval", "--config", str(cfg),
                             "--checkpoint", str(final_ckpt),
                             "--base-ap-reference", "0.5"])
    assert "overall AP" in result.output
    report_path = out / "report_checkpoint_balanced_finetune_test.json"
    assert report_path.exists()
    report = json.loads(report_path.read_text())
    assert set(map(int, report["per_class_ap"])) == {1, 2, 3, 4}
    assert report["base_class_ids"] == [1, 2]
    assert report["novel_class_ids"] == [3, 4]
    assert report["base_ap_pretrain"] == 0.5

    invoke(runner, ["proposals", "--config", str(cfg),
                    "--checkpoint", str(final_ckpt), "--budget", "5"])
    dump = out / "proposals_checkpoint_balanced_finetune_test.jsonl"
    lines = [json.loads(l) for l in dump.read_text().splitlines()]
    assert lines, "proposal dump should not be empty"
    assert set(lines[0]) == {"image_id", "box", "score"}
    per_image = {}
    for row in lines:
        per_image.setdefault(row["image_id"], []).append(row)
    assert all(len(v) <= 5 for v in per_image.values())

    invoke(runner, ["plot", "--config", str(cfg),
                    "--metrics", str(out / "metrics_base_pretrain.csv"),
                    "--report", str(report_path)])
    assert (out / "metrics_base_pretrain.png").exists()
    assert report_path.with_suffix(".png").exists()


def test_finetune_single_stage_from_checkpoint(runner, tmp_path):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "runs"
    invoke(runner, ["synth", "--config", str(cfg)])
    invoke(runner, ["split", "--config", str(cfg)])
    invoke(runner, ["pretrain", "--config", str(cfg)])
    invoke(runner, ["finetune", "--config", str(cfg), "--stage", "novel_head"])
    assert (out / "checkpoint_novel_head.ckpt").exists()
    assert not (out / "checkpoint_balanced_finetune.ckpt").exists()
    invoke(runner, ["finetune", "--config", str(cfg),
                    "--stage", "balanced_finetune",
                    "--checkpoint", str(out / "checkpoint_novel_head.ckpt")])
    assert (out / "checkpoint_balanced_finetune.ckpt").exists()
