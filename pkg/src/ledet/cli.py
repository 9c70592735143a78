"""Command-line interface for dataset generation, training, and evaluation.

Every command resolves its configuration the same way: profile defaults, an
optional YAML file, then repeated --set key.path=value overrides, validated
against the full schema (unknown keys are rejected with their dotted path).
The resolved configuration is written next to each command's outputs, and
every output directory respects $LEDET_OUTPUT_ROOT.
"""

from __future__ import annotations

from pathlib import Path

import click

from .config import ConfigError, load_config, resolve_output_dir, save_resolved
from .data import DataError, build_few_shot_split, load_coco_json
from .evaluate import propose_dataset, save_report, write_proposal_dump
from .metrics import MetricsError
from .pipeline import (PipelineError, evaluate_trained, finetune_balanced,
                       pretrain_base, train_novel_head)
from .plots import PlotsError, plot_class_ap, plot_training_curves
from .synth import SyntheticSceneSpec, generate_synthetic_dataset

_FAILURES = (ConfigError, DataError, PipelineError, PlotsError, MetricsError,
             FileNotFoundError)


def common_options(fn):
    fn = click.option("--config", "config_path",
                      type=click.Path(exists=True, dir_okay=False),
                      default=None, help="YAML config file.")(fn)
    fn = click.option("--profile", default="desk", show_default=True,
                      help="Named configuration profile (desk or coco).")(fn)
    fn = click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                      help="Override one config value by dotted path; repeatable.")(fn)
    fn = click.option("--seed", type=int, default=None,
                      help="Override the experiment seed.")(fn)
    fn = click.option("--output-dir", default=None,
                      help="Override the configured output directory.")(fn)
    return fn


def resolve(config_path, profile, overrides, seed, output_dir):
    try:
        cfg = load_config(config_path, profile, list(overrides))
    except ConfigError as e:
        raise click.ClickException(str(e)) from None
    if seed is not None:
        cfg["seed"] = int(seed)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    return cfg, resolve_output_dir(cfg)


def dataset_root(cfg: dict, out_dir: Path) -> Path:
    root = cfg["dataset"]["root"]
    return Path(root) if root else out_dir / "data"


def load_train_index(cfg: dict, out_dir: Path):
    return load_coco_json(dataset_root(cfg, out_dir) / cfg["dataset"]["train_ann"])


def load_test_index(cfg: dict, out_dir: Path):
    return load_coco_json(dataset_root(cfg, out_dir) / cfg["dataset"]["test_ann"])


def split_path(cfg: dict, out_dir: Path) -> Path:
    configured = cfg["split"]["path"]
    return Path(configured) if configured else out_dir / "split.json"


def load_split(cfg: dict, out_dir: Path):
    from .data import FewShotSplit
    path = split_path(cfg, out_dir)
    if not path.exists():
        raise click.ClickException(
            f"split file {path} not found; run `ledet split` first "
            "or point split.path at an existing file")
    return FewShotSplit.load(path)


def run(fn, *args, **kwargs):
    """Run a step, converting domain errors into a nonzero exit."""
    try:
        return fn(*args, **kwargs)
    except _FAILURES as e:
        raise click.ClickException(str(e)) from None


@click.group()
def main():
    """Semi-supervised few-shot object detection experiments."""


@main.command()
@common_options
def synth(config_path, profile, overrides, seed, output_dir):
    """Generate the synthetic train and test datasets."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    root = dataset_root(cfg, out)
    ds = cfg["dataset"]
    class_ids = tuple(sorted(set(cfg["split"]["base_class_ids"])
                             | set(cfg["split"]["novel_class_ids"])))
    spec = run(SyntheticSceneSpec,
               canvas_size=ds["synth_canvas"], class_ids=class_ids,
               objects_min=ds["synth_objects"][0], objects_max=ds["synth_objects"][1],
               size_range=tuple(float(v) for v in ds["synth_size_range"]),
               color_jitter=float(ds["synth_color_jitter"]))
    train = run(generate_synthetic_dataset, spec, ds["synth_train_images"],
                root, seed=cfg["seed"], subset="train")
    test = run(generate_synthetic_dataset, spec, ds["synth_test_images"],
               root, seed=cfg["seed"], subset="test")
    save_resolved(cfg, root)
    click.echo(f"wrote {train}")
    click.echo(f"wrote {test}")


@main.command()
@common_options
def split(config_path, profile, overrides, seed, output_dir):
    """Sample the few-shot split (k shots per class) from the train set."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    index = run(load_train_index, cfg, out)
    result = run(build_few_shot_split, index,
                 set(cfg["split"]["base_class_ids"]),
                 set(cfg["split"]["novel_class_ids"]),
                 cfg["split"]["k"], cfg["split"]["seed"])
    path = split_path(cfg, out)
    path.parent.mkdir(parents=True, exist_ok=True)
    result.save(path)
    save_resolved(cfg, out)
    click.echo(f"wrote {path} ({result.k} shots x "
               f"{len(result.base_class_ids) + len(result.novel_class_ids)} classes)")


@main.command()
@common_options
def pretrain(config_path, profile, overrides, seed, output_dir):
    """Stage 1: train on base classes with the unlabeled pool."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    index = run(load_train_index, cfg, out)
    fss = load_split(cfg, out)
    save_resolved(cfg, out)
    ckpt = run(pretrain_base, cfg, index, fss, out)
    click.echo(f"wrote {ckpt}")


@main.command()
@common_options
@click.option("--checkpoint", "ckpt", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Starting checkpoint "
              "[default: <output-dir>/checkpoint_base_pretrain.ckpt].")
@click.option("--stage", type=click.Choice(["novel_head", "balanced_finetune", "both"]),
              default="both", show_default=True,
              help="Which fine-tuning stage(s) to run.")
def finetune(config_path, profile, overrides, seed, output_dir, ckpt, stage):
    """Stages 2-3: novel-head training, then balanced fine-tuning."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    index = run(load_train_index, cfg, out)
    fss = load_split(cfg, out)
    save_resolved(cfg, out)
    if ckpt is None:
        default_name = ("checkpoint_base_pretrain.ckpt" if stage != "balanced_finetune"
                        else "checkpoint_novel_head.ckpt")
        ckpt = out / default_name
        if not ckpt.exists():
            raise click.ClickException(f"no checkpoint at {ckpt}; pass --checkpoint")
    current = Path(ckpt)
    if stage in ("novel_head", "both"):
        current = run(train_novel_head, cfg, index, fss, current, out)
        click.echo(f"wrote {current}")
    if stage in ("balanced_finetune", "both"):
        current = run(finetune_balanced, cfg, index, fss, current, out)
        click.echo(f"wrote {current}")


@main.command("eval")
@common_options
@click.option("--checkpoint", "ckpt", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Training checkpoint to evaluate (teacher branch).")
@click.option("--subset", type=click.Choice(["test", "train"]), default="test",
              show_default=True, help="Annotation file to evaluate on.")
@click.option("--base-ap-reference", type=float, default=None,
              help="Base-class AP of the pretraining checkpoint, for the "
              "forgetting percentage.")
@click.option("--branch", type=click.Choice(["teacher", "student"]),
              default="teacher", show_default=True)
def eval_cmd(config_path, profile, overrides, seed, output_dir, ckpt, subset,
             base_ap_reference, branch):
    """Evaluate a checkpoint: AP, detection recall, and proposal recall."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    index = run(load_test_index if subset == "test" else load_train_index, cfg, out)
    report = run(evaluate_trained, ckpt, index, cfg,
                 base_ap_pretrain=base_ap_reference, branch=branch)
    path = out / f"report_{Path(ckpt).stem}_{subset}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_report(report, path)
    save_resolved(cfg, out)
    for line in report.lines():
        click.echo(line)
    click.echo(f"wrote {path}")


@main.command()
@common_options
@click.option("--checkpoint", "ckpt", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Training checkpoint whose region proposals to dump.")
@click.option("--subset", type=click.Choice(["test", "train"]), default="test",
              show_default=True)
@click.option("--budget", type=int, default=None,
              help="Proposals kept per image [default: max of eval.proposal_counts].")
def proposals(config_path, profile, overrides, seed, output_dir, ckpt, subset,
              budget):
    """Dump region proposals as JSON lines: {image_id, box, score}."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    index = run(load_test_index if subset == "test" else load_train_index, cfg, out)
    if budget is None:
        budget = max(int(p) for p in cfg["eval"]["proposal_counts"])
    from .pipeline import load_training_checkpoint
    _, teacher, _ = run(load_training_checkpoint, ckpt)
    props = run(propose_dataset, teacher, index, index.image_ids,
                test_short_edge=cfg["augment"]["test_short_edge"],
                max_proposals=budget)
    path = out / f"proposals_{Path(ckpt).stem}_{subset}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_proposal_dump(path, props)
    save_resolved(cfg, out)
    click.echo(f"wrote {path} ({sum(len(v) for v in props.values())} proposals)")


@main.command()
@common_options
@click.option("--metrics", "metrics_csv", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Training metrics CSV to plot.")
@click.option("--report", "report_json", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Evaluation report JSON to plot.")
def plot(config_path, profile, overrides, seed, output_dir, metrics_csv,
         report_json):
    """Render training curves and per-class AP charts as PNG files."""
    cfg, out = resolve(config_path, profile, overrides, seed, output_dir)
    if metrics_csv is None and report_json is None:
        raise click.ClickException("pass --metrics and/or --report")
    if metrics_csv is not None:
        png = Path(metrics_csv).with_suffix(".png")
        run(plot_training_curves, metrics_csv, png,
            columns=["L_sup", "L_cls_soft", "L_reg_soft", "L_ent", "L_iou", "total"])
        click.echo(f"wrote {png}")
    if report_json is not None:
        from .evaluate import load_report
        report = run(load_report, report_json)
        png = Path(report_json).with_suffix(".png")
        run(plot_class_ap, report.per_class_ap, png,
            base_ids=report.base_class_ids, novel_ids=report.novel_class_ids)
        click.echo(f"wrote {png}")


if __name__ == "__main__":
    main()
