"""Declarative experiment configuration: schema, profiles, overrides, hashing.

A config is a plain nested dict matching the schema below. Unknown keys are
rejected with the full key path; every run writes its resolved config next to
its outputs so the artifact records exactly what produced it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


# Full schema with desk-profile defaults. Values are also the type templates:
# override values must be coercible to the default's type (None allows any).
DEFAULTS: dict = {
    "dataset": {
        "root": "",
        "train_ann": "train.json",
        "test_ann": "test.json",
        "unlabeled_from_train": True,
        "synth_train_images": 300,
        "synth_test_images": 80,
        "synth_canvas": 64,
        "synth_objects": [1, 4],
        "synth_size_range": [12, 24],
        "synth_color_jitter": 20,
    },
    "split": {
        "base_class_ids": [1, 2, 3, 4, 5, 6],
        "novel_class_ids": [7, 8],
        "k": 10,
        "labeled_percent": 10.0,
        "seed": 0,
        "path": None,
    },
    "augment": {
        "resize_short_edge": [48, 96],
        "test_short_edge": 64,
        "flip_prob": 0.5,
        "color_op_count": 9,
        "geometric_op_prob": 0.3333333333333333,
        "translation_range": [-0.1, 0.1],
        "shear_range_deg": [-30.0, 30.0],
        "rotation_range_deg": [-30.0, 30.0],
        "cutout_count": [1, 5],
        "cutout_size": [0.0, 0.2],
        "solarize_threshold": [0, 256],
        "posterize_bits": [4, 8],
        "enhance_factor": [0.1, 1.9],
    },
    "detector": {
        "num_foreground_classes": 6,
        "base_channels": 16,
        "fpn_channels": 32,
        "roi_pool_size": 4,
        "roi_hidden": 128,
        "anchor_ratios": [0.5, 1.0, 2.0],
        "rpn_pre_nms": 512,
        "rpn_post_nms": 128,
        "rpn_nms_thresh": 0.7,
        "rpn_pos_iou": 0.7,
        "rpn_neg_iou": 0.3,
        "rpn_batch_per_image": 64,
        "rpn_fg_fraction": 0.5,
        "roi_fg_iou": 0.5,
        "roi_batch_per_image": 48,
        "roi_fg_fraction": 0.25,
        "top_n_proposals": 512,
        "score_thresh": 0.05,
        "test_nms_thresh": 0.5,
        "max_detections": 100,
        "dtype": "float32",
    },
    "semisup": {
        "tau_cls": 0.9,
        "tau_var": 0.02,
        "n_jitter": 10,
        "jitter_amplitude": 0.06,
        "ema_momentum": 0.999,
        # teacher momentum for the short novel-head/fine-tune stages;
        # null inherits ema_momentum
        "ema_momentum_fewshot": None,
        # keep generating pseudo labels while the novel head trains
        "pseudo_labels_in_novel_head": True,
    },
    "entreg": {
        "enabled": True,
        "measure": "cross_entropy",
        "overlap": "iou",
        "beta_multiplier": 2.0,
        "active_in_novel_head": True,
        "active_in_balanced_finetune": False,
        "pair_top_n": 32,
    },
    "schedule": {
        "batch_labeled": 4,
        "batch_unlabeled": 8,
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "milestones": [400, 500],
        "total_iterations": 550,
        "burn_in_steps": 0,
        "copy_teacher_at_burn_in": False,
        "novel_head_includes_base": False,
        "novel_head_iterations": 150,
        "finetune_iterations": 100,
        "finetune_lr": 0.005,
        "finetune_trainable": ["roi_classifier"],
        "log_every": 1,
    },
    "eval": {
        "proposal_counts": [100, 300, 1000],
        "novel_init": "random",
        "novel_init_std": 0.01,
    },
    "output_dir": "runs/exp",
    "seed": 0,
}

# Named profiles: shallow per-key overrides of DEFAULTS.
PROFILES: dict[str, dict] = {
    "desk": {},
    "coco": {
        "augment": {
            "resize_short_edge": [400, 1200],
            "test_short_edge": 800,
        },
        "detector": {
            "base_channels": 64,
            "fpn_channels": 256,
            "roi_pool_size": 7,
            "roi_hidden": 1024,
            "rpn_pre_nms": 2000,
            "rpn_post_nms": 1000,
            "rpn_batch_per_image": 256,
            "roi_batch_per_image": 512,
            "top_n_proposals": 512,
            "num_foreground_classes": 60,
        },
        "schedule": {
            "batch_labeled": 8,
            "batch_unlabeled": 32,
            "lr": 0.01,
            "milestones": [120000, 160000],
            "total_iterations": 180000,
        },
        "semisup": {"ema_momentum": 0.999},
        "eval": {"novel_init": "continue"},
        "split": {
            "base_class_ids": list(range(1, 61)),
            "novel_class_ids": list(range(61, 81)),
            "labeled_percent": 10.0,
        },
    },
}


def default_config(profile: str = "desk") -> dict:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; available: {sorted(PROFILES)}")
    cfg = copy.deepcopy(DEFAULTS)
    _merge(cfg, PROFILES[profile], path="")
    return cfg


def load_config(path=None, profile: str = "desk", overrides: list[str] | None = None) -> dict:
    """Resolve defaults <- profile <- file <- --set overrides, then validate."""
    cfg = default_config(profile)
    if path is not None:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        doc.pop("profile", None)
        _merge(cfg, doc, path="")
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key.path=value, got {item!r}")
        key, _, raw = item.partition("=")
        apply_override(cfg, key.strip(), raw.strip())
    validate_config(cfg)
    return cfg


def _merge(base: dict, extra: dict, path: str) -> None:
    for key, value in extra.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            _merge(base[key], value, here)
        else:
            base[key] = _coerce(base[key], value, here)


def _coerce(template, value, path: str):
    if template is None or value is None:
        return value
    if isinstance(template, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{path} must be a boolean")
    if isinstance(template, (int, float)) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return type(template)(value) if isinstance(template, float) else value
    if isinstance(template, str) and isinstance(value, str):
        return value
    if isinstance(template, list) and isinstance(value, list):
        return value
    raise ConfigError(f"{path} expects {type(template).__name__}, got {type(value).__name__}")


def apply_override(cfg: dict, dotted_key: str, raw_value: str) -> None:
    """Apply one --set key.path=value override; value parsed as YAML scalar."""
    node = cfg
    parts = dotted_key.split(".")
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key: {dotted_key}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key: {dotted_key}")
    value = yaml.safe_load(raw_value)
    node[leaf] = _coerce(node[leaf], value, dotted_key)


def validate_config(cfg: dict) -> None:
    _check_keys(cfg, DEFAULTS, path="")
    sched = cfg["schedule"]
    if sched["batch_labeled"] < 1:
        raise ConfigError("schedule.batch_labeled must be >= 1")
    if sched["batch_unlabeled"] < 0:
        raise ConfigError("schedule.batch_unlabeled must be >= 0")
    ms = sched["milestones"]
    if any(b <= a for a, b in zip(ms, ms[1:])):
        raise ConfigError("schedule.milestones must be strictly increasing")
    if ms and ms[-1] >= sched["total_iterations"]:
        raise ConfigError("schedule.milestones must be < schedule.total_iterations")
    groups = {"backbone", "neck", "rpn", "roi_classifier", "roi_regressor"}
    trainable = sched["finetune_trainable"]
    if not trainable:
        raise ConfigError("schedule.finetune_trainable must not be empty")
    if not set(trainable) <= groups:
        raise ConfigError(
            f"schedule.finetune_trainable entries must be among {sorted(groups)}")
    for count_key in ("novel_head_iterations", "finetune_iterations", "burn_in_steps"):
        if sched[count_key] < 0:
            raise ConfigError(f"schedule.{count_key} must be >= 0")
    if not 0 < cfg["split"]["labeled_percent"] <= 100:
        raise ConfigError("split.labeled_percent must be in (0, 100]")
    base = set(cfg["split"]["base_class_ids"])
    novel = set(cfg["split"]["novel_class_ids"])
    if base & novel:
        raise ConfigError("split: base and novel class sets overlap")
    if not 0 < cfg["semisup"]["ema_momentum"] <= 1:
        raise ConfigError("semisup.ema_momentum must be in (0, 1]")
    fewshot_m = cfg["semisup"]["ema_momentum_fewshot"]
    if fewshot_m is not None and not 0 < fewshot_m <= 1:
        raise ConfigError("semisup.ema_momentum_fewshot must be in (0, 1] or null")
    if cfg["entreg"]["measure"] not in ("cross_entropy", "kl"):
        raise ConfigError("entreg.measure must be cross_entropy or kl")
    if cfg["entreg"]["overlap"] not in ("iou", "giou"):
        raise ConfigError("entreg.overlap must be iou or giou")
    if cfg["eval"]["novel_init"] not in ("random", "continue"):
        raise ConfigError("eval.novel_init must be random or continue")
    for lo_hi_key in ("resize_short_edge", "translation_range", "shear_range_deg",
                      "rotation_range_deg", "cutout_count", "cutout_size",
                      "solarize_threshold", "posterize_bits", "enhance_factor"):
        lo, hi = cfg["augment"][lo_hi_key]
        if lo > hi:
            raise ConfigError(f"augment.{lo_hi_key} range must satisfy lo <= hi")
    if not 0 <= cfg["augment"]["flip_prob"] <= 1:
        raise ConfigError("augment.flip_prob must be in [0, 1]")


def _check_keys(node, template, path: str) -> None:
    for key, value in node.items():
        here = f"{path}.{key}" if path else key
        if key not in template:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(template[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{here} must be a mapping")
            _check_keys(value, template[key], here)


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def resolve_output_dir(cfg: dict) -> Path:
    """output_dir, re-rooted under $LEDET_OUTPUT_ROOT when that is set."""
    out = Path(cfg["output_dir"])
    root = os.environ.get("LEDET_OUTPUT_ROOT")
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def save_resolved(cfg: dict, out_dir) -> Path:
    """Write the resolved config next to the run's outputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(cfg, f, sort_keys=True, default_flow_style=None)
    return path
