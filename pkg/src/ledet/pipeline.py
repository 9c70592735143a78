"""Three-stage training: base pretraining with a mean-teacher on unlabeled
images, novel-head training seeded from the teacher, and balanced fine-tuning.

One student/teacher pair runs through every stage. The student is trained by
SGD; the teacher is its exponential moving average and is the branch that
labels unlabeled images, weights soft background targets, anchors the
proposal-consistency terms, and gets evaluated. Checkpoints always hold both
branches.

Every random draw (batch sampling, augmentation, target sampling, box jitter)
comes from a purpose-named stream keyed by (seed, stage, purpose, step, slot),
so disabling one branch of the objective never shifts the draws of another:
a run with no unlabeled batch is step-for-step identical to plain supervised
training, and zeroing the consistency weight reproduces the plain
pseudo-label run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentationRecipe, augment, recipe_from_config, relate_views
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash
from .data import (ClassMapping, DatasetIndex, FewShotSplit, class_mapping,
                   sample_labeled_fraction)
from .detector import (PARAM_GROUPS, TwoStageDetector, assign_roi_targets,
                       assign_rpn_targets, detector_from_config, encode_deltas,
                       group_of, init_parameters, load_state_arrays,
                       rpn_loss, roi_loss, sample_balanced, state_arrays)
from .entreg import loss_weights, proposal_consistency_losses
from .evaluate import evaluate_model, load_image
from .geometry import apply_affine_boxes
from .metrics import EvalReport
from .plots import MetricsLog
from .seeds import stream
from .semisup import (background_reliability, copy_parameters, ema_update,
                      freeze_parameters, generate_pseudo_labels,
                      map_pseudo_labels)

STAGES = ("base_pretrain", "novel_head", "balanced_finetune")

METRIC_FIELDS = ("step", "L_sup", "L_cls_soft", "L_reg_soft", "L_ent", "L_iou",
                 "total", "lr", "rpn_sup", "rpn_unsup", "alpha", "beta")


class PipelineError(RuntimeError):
    pass


# ---- stage plans -----------------------------------------------------------

@dataclass(frozen=True)
class StagePlan:
    """Everything one training stage needs to know about its schedule."""

    name: str
    steps: int
    lr: float
    milestones: tuple[int, ...]
    batch_labeled: int
    batch_unlabeled: int
    trainable: tuple[str, ...]
    use_pseudo_labels: bool
    use_proposal_consistency: bool
    train_rpn: bool
    burn_in: int = 0
    copy_teacher_at_burn_in: bool = False


def build_stage_plan(cfg: dict, stage: str) -> StagePlan:
    sched, ent, semi = cfg["schedule"], cfg["entreg"], cfg["semisup"]
    if stage not in STAGES:
        raise PipelineError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if sched["batch_labeled"] < 1:
        raise PipelineError("batch_labeled must be >= 1")
    b_u = sched["batch_unlabeled"]
    if stage == "base_pretrain":
        return StagePlan(
            name=stage, steps=sched["total_iterations"], lr=sched["lr"],
            milestones=tuple(sched["milestones"]),
            batch_labeled=sched["batch_labeled"], batch_unlabeled=b_u,
            trainable=tuple(PARAM_GROUPS),
            use_pseudo_labels=b_u > 0,
            use_proposal_consistency=ent["enabled"] and b_u > 0,
            train_rpn=True,
            burn_in=sched["burn_in_steps"],
            copy_teacher_at_burn_in=sched["copy_teacher_at_burn_in"])
    if stage == "novel_head":
        return StagePlan(
            name=stage, steps=sched["novel_head_iterations"],
            lr=sched["finetune_lr"], milestones=(),
            batch_labeled=sched["batch_labeled"], batch_unlabeled=b_u,
            trainable=("roi_classifier", "roi_regressor"),
            use_pseudo_labels=b_u > 0 and semi["pseudo_labels_in_novel_head"],
            use_proposal_consistency=(ent["enabled"] and ent["active_in_novel_head"]
                                      and b_u > 0),
            train_rpn=False)
    # balanced_finetune: unlabeled images only feed the consistency terms
    consistency = ent["enabled"] and ent["active_in_balanced_finetune"] and b_u > 0
    return StagePlan(
        name=stage, steps=sched["finetune_iterations"],
        lr=sched["finetune_lr"], milestones=(),
        batch_labeled=sched["batch_labeled"],
        batch_unlabeled=b_u if consistency else 0,
        trainable=tuple(sched["finetune_trainable"]),
        use_pseudo_labels=False,
        use_proposal_consistency=consistency,
        train_rpn=False)


def lr_at(step: int, base_lr: float, milestones) -> float:
    """Step-decay schedule: one 10x drop at each milestone already reached."""
    return base_lr * 0.1 ** sum(1 for m in milestones if step >= m)


def apply_freeze_policy(model: torch.nn.Module, trainable) -> list[torch.nn.Parameter]:
    """Mark exactly `trainable` parameter groups as requiring gradients and
    return their parameters (the only ones an optimizer should see)."""
    groups = set(trainable)
    if not groups:
        raise PipelineError("freeze policy leaves no parameter group trainable")
    unknown = groups - set(PARAM_GROUPS)
    if unknown:
        raise PipelineError(f"unknown parameter groups: {sorted(unknown)}; "
                            f"expected a subset of {PARAM_GROUPS}")
    params: list[torch.nn.Parameter] = []
    for name, p in model.named_parameters():
        keep = group_of(name) in groups
        p.requires_grad_(keep)
        if keep:
            params.append(p)
    return params


# ---- data plumbing ---------------------------------------------------------

@dataclass(frozen=True)
class LabeledExample:
    """One labeled training image; annotation_ids=None means every annotation
    of a mapped class, otherwise only the listed annotations count."""

    image_id: int
    annotation_ids: tuple[int, ...] | None = None


@dataclass(frozen=True)
class StageData:
    index: DatasetIndex
    mapping: ClassMapping
    labeled: tuple[LabeledExample, ...]
    unlabeled_ids: tuple[int, ...]


def gt_for_example(index: DatasetIndex, example: LabeledExample,
                   mapping: ClassMapping) -> tuple[np.ndarray, np.ndarray]:
    """(boxes (G,4) float64, contiguous class ids (G,)) for one example."""
    anns = index.annotations_for(example.image_id)
    if example.annotation_ids is not None:
        keep = set(example.annotation_ids)
        anns = [a for a in anns if a.id in keep]
    else:
        known = set(mapping.dataset_ids)
        anns = [a for a in anns if a.class_id in known]
    boxes = np.array([[a.box.x1, a.box.y1, a.box.x2, a.box.y2] for a in anns],
                     dtype=np.float64).reshape(-1, 4)
    classes = np.array([mapping.contiguous(a.class_id) for a in anns], dtype=np.int64)
    return boxes, classes


def shot_examples(split: FewShotSplit, class_ids) -> tuple[LabeledExample, ...]:
    """Labeled examples covering the sampled shots of `class_ids`; an image
    contributing shots to several classes appears once with all of them."""
    by_image: dict[int, set[int]] = {}
    for cid in class_ids:
        if cid not in split.shot_instances:
            raise PipelineError(f"split has no shots for class {cid}")
        for image_id, ann_id in split.shot_instances[cid]:
            by_image.setdefault(image_id, set()).add(ann_id)
    return tuple(LabeledExample(i, tuple(sorted(a)))
                 for i, a in sorted(by_image.items()))


def map_boxes_to_view(view, boxes: np.ndarray, classes: np.ndarray,
                      min_size: float = 1.0):
    """Ground truth into view coordinates; clipped, slivers dropped."""
    if len(boxes) == 0:
        return boxes.reshape(0, 4), classes
    mapped = apply_affine_boxes(view.transform, np.asarray(boxes, dtype=np.float64))
    mapped[:, 0::2] = mapped[:, 0::2].clip(0.0, float(view.width))
    mapped[:, 1::2] = mapped[:, 1::2].clip(0.0, float(view.height))
    keep = ((mapped[:, 2] - mapped[:, 0] >= min_size)
            & (mapped[:, 3] - mapped[:, 1] >= min_size))
    return mapped[keep], np.asarray(classes)[keep]


@lru_cache(maxsize=1024)
def _cached_image(path: str, mtime_ns: int) -> np.ndarray:
    return load_image(path)


def _load_train_image(path) -> np.ndarray:
    path = str(path)
    return _cached_image(path, os.stat(path).st_mtime_ns)


def _draw(rng: np.random.Generator, pool_size: int, batch: int) -> np.ndarray:
    """Batch of pool indices: without replacement when the pool allows it."""
    if pool_size <= 0:
        raise PipelineError("cannot draw a batch from an empty pool")
    if pool_size >= batch:
        return np.sort(rng.choice(pool_size, size=batch, replace=False))
    return np.sort(rng.integers(0, pool_size, size=batch))


# ---- one-image training forward -------------------------------------------

@dataclass
class TrainForward:
    feats: tuple
    proposals: np.ndarray  # raw score-sorted region proposals, float64
    roi_cls: torch.Tensor
    roi_reg: torch.Tensor
    rpn_obj: torch.Tensor
    rpn_reg: torch.Tensor


def _forward_train(model: TwoStageDetector, image: np.ndarray,
                   gt_boxes: np.ndarray, gt_classes: np.ndarray, det: dict, *,
                   rng_rpn: np.random.Generator, rng_roi: np.random.Generator,
                   train_rpn: bool, train_roi: bool = True, bg_weight_fn=None,
                   reg_reliable: np.ndarray | None = None) -> TrainForward:
    """Losses for one image given (possibly empty) view-frame ground truth.

    `bg_weight_fn(boxes, labels)` may supply per-proposal classification
    weights; `reg_reliable` marks which ground-truth boxes may supervise
    regression (others contribute classification only).
    """
    t = model.image_to_tensor(image)
    h, w = int(t.shape[-2]), int(t.shape[-1])
    feats = model.features(t)
    zero = torch.zeros((), dtype=model.dtype)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_t = torch.tensor(gt_boxes, dtype=model.dtype)

    rpn_obj, rpn_reg = zero, zero.clone()
    if train_rpn:
        logits, deltas = model.rpn_raw(feats)
        anchors_t = torch.cat(model.level_anchors(feats))
        anchors = anchors_t.double().numpy()
        labels, matched = assign_rpn_targets(anchors, gt_boxes,
                                             pos_iou=det["rpn_pos_iou"],
                                             neg_iou=det["rpn_neg_iou"])
        sel = sample_balanced(labels, labels == 1, det["rpn_batch_per_image"],
                              det["rpn_fg_fraction"], rng_rpn)
        if len(sel):
            sel_t = torch.from_numpy(sel)
            if len(gt_boxes):
                targets = encode_deltas(anchors_t[sel_t],
                                        gt_t[torch.from_numpy(matched[sel])])
            else:
                targets = torch.zeros((len(sel), 4), dtype=model.dtype)
            rpn_obj, rpn_reg = rpn_loss(logits[sel_t], deltas[sel_t],
                                        torch.from_numpy(labels[sel]), targets)

    proposals_t, _ = model.proposals_from_features(feats, (h, w))
    raw_proposals = proposals_t.double().numpy()
    roi_cls, roi_reg = zero.clone(), zero.clone()
    if train_roi:
        if len(gt_boxes):
            proposals_t = torch.cat([proposals_t.to(model.dtype), gt_t])
        candidates = proposals_t.double().numpy()
        background = model.num_foreground_classes
        labels, matched = assign_roi_targets(candidates, gt_boxes, gt_classes,
                                             background_index=background,
                                             fg_iou=det["roi_fg_iou"])
        sel = sample_balanced(labels, labels != background,
                              det["roi_batch_per_image"],
                              det["roi_fg_fraction"], rng_roi)
        if len(sel):
            sel_t = torch.from_numpy(sel)
            pred = model.roi_predict(feats, proposals_t[sel_t])
            if len(gt_boxes):
                targets = encode_deltas(proposals_t[sel_t],
                                        gt_t[torch.from_numpy(matched[sel])])
            else:
                targets = torch.zeros((len(sel), 4), dtype=model.dtype)
            cls_weights = None
            if bg_weight_fn is not None:
                cls_weights = bg_weight_fn(candidates[sel], labels[sel])
            reg_mask = None
            if reg_reliable is not None and len(gt_boxes):
                reg_mask = torch.from_numpy(
                    np.asarray(reg_reliable, dtype=bool)[matched[sel]])
            roi_cls, roi_reg = roi_loss(pred.logits, pred.deltas,
                                        torch.from_numpy(labels[sel]), targets,
                                        cls_weights=cls_weights, reg_mask=reg_mask)
    return TrainForward(feats, raw_proposals, roi_cls, roi_reg, rpn_obj, rpn_reg)


def _mean(terms: list[torch.Tensor], dtype: torch.dtype) -> torch.Tensor:
    if not terms:
        return torch.zeros((), dtype=dtype)
    return torch.stack(terms).mean()


# ---- the training step -----------------------------------------------------

def train_step(student: TwoStageDetector, teacher: TwoStageDetector,
               optimizer: torch.optim.Optimizer, plan: StagePlan,
               data: StageData, cfg: dict,
               recipes: dict[str, AugmentationRecipe], step: int) -> dict[str, float]:
    """One optimization step; returns the logged loss components."""
    det, semi, ent = cfg["detector"], cfg["semisup"], cfg["entreg"]
    seed = cfg["seed"]
    dtype = student.dtype

    if plan.copy_teacher_at_burn_in and plan.burn_in > 0 and step == plan.burn_in:
        copy_parameters(teacher, student)

    lr = lr_at(step, plan.lr, plan.milestones)
    for group in optimizer.param_groups:
        group["lr"] = lr

    # labeled branch
    rng_bl = stream(seed, plan.name, "batch_l", step)
    batch_l = _draw(rng_bl, len(data.labeled), plan.batch_labeled)
    sup_cls, sup_reg, sup_rpn = [], [], []
    for slot, idx in enumerate(batch_l):
        example = data.labeled[int(idx)]
        image = _load_train_image(data.index.image_path(example.image_id))
        view = augment(image, recipes["labeled"],
                       stream(seed, plan.name, "aug_l", step, slot))
        gt_b, gt_c = gt_for_example(data.index, example, data.mapping)
        gt_b, gt_c = map_boxes_to_view(view, gt_b, gt_c)
        out = _forward_train(student, view.image, gt_b, gt_c, det,
                             rng_rpn=stream(seed, plan.name, "rpn_l", step, slot),
                             rng_roi=stream(seed, plan.name, "roi_l", step, slot),
                             train_rpn=plan.train_rpn)
        sup_cls.append(out.roi_cls)
        sup_reg.append(out.roi_reg)
        sup_rpn.append(out.rpn_obj + out.rpn_reg)

    # unlabeled branch
    unsup_on = (plan.batch_unlabeled > 0 and step >= plan.burn_in
                and (plan.use_pseudo_labels or plan.use_proposal_consistency))
    weights = loss_weights(plan.batch_unlabeled if unsup_on else 0,
                           plan.batch_labeled, ent["beta_multiplier"],
                           plan.use_proposal_consistency)
    alpha, beta = weights.alpha, weights.beta
    consistency_on = unsup_on and plan.use_proposal_consistency and beta != 0.0
    u_cls, u_reg, u_rpn, ent_terms, iou_terms = [], [], [], [], []
    if unsup_on and (plan.use_pseudo_labels or consistency_on):
        rng_bu = stream(seed, plan.name, "batch_u", step)
        batch_u = _draw(rng_bu, len(data.unlabeled_ids), plan.batch_unlabeled)
        for slot, idx in enumerate(batch_u):
            image = _load_train_image(data.index.image_path(data.unlabeled_ids[int(idx)]))
            view_w = augment(image, recipes["weak"],
                             stream(seed, plan.name, "aug_w", step, slot))
            view_s = augment(image, recipes["strong"],
                             stream(seed, plan.name, "aug_s", step, slot))
            to_student = relate_views(view_s, view_w)
            to_teacher = relate_views(view_w, view_s)
            with torch.no_grad():
                t_feats = teacher.features(teacher.image_to_tensor(view_w.image))

            gt_b = np.zeros((0, 4))
            gt_c = np.zeros(0, dtype=np.int64)
            reliable = None
            bg_weight_fn = None
            if plan.use_pseudo_labels:
                pseudo = generate_pseudo_labels(
                    teacher, view_w.image, tau_cls=semi["tau_cls"],
                    tau_var=semi["tau_var"], n_jitter=semi["n_jitter"],
                    jitter_amplitude=semi["jitter_amplitude"],
                    rng=stream(seed, plan.name, "jitter", step, slot),
                    score_thresh=det["score_thresh"],
                    nms_thresh=det["test_nms_thresh"],
                    max_detections=det["max_detections"],
                    top_n=det["top_n_proposals"])
                mapped = map_pseudo_labels(pseudo, to_student,
                                           view_wh=(view_s.width, view_s.height))
                if mapped:
                    gt_b = np.array([[p.box.x1, p.box.y1, p.box.x2, p.box.y2]
                                     for p in mapped])
                    gt_c = np.array([p.class_id for p in mapped], dtype=np.int64)
                    reliable = np.array([p.reg_reliable for p in mapped], dtype=bool)

                def bg_weight_fn(boxes, labels, _to_t=to_teacher, _tf=t_feats,
                                 _wh=(view_w.width, view_w.height)):
                    weights = np.ones(len(labels))
                    bg = labels == student.num_foreground_classes
                    if bg.any():
                        t_boxes = apply_affine_boxes(_to_t, boxes[bg])
                        t_boxes[:, 0::2] = t_boxes[:, 0::2].clip(0.0, float(_wh[0]))
                        t_boxes[:, 1::2] = t_boxes[:, 1::2].clip(0.0, float(_wh[1]))
                        weights[bg] = background_reliability(teacher, _tf, t_boxes)
                    return torch.tensor(weights, dtype=dtype)

            out = _forward_train(student, view_s.image, gt_b, gt_c, det,
                                 rng_rpn=stream(seed, plan.name, "rpn_u", step, slot),
                                 rng_roi=stream(seed, plan.name, "roi_u", step, slot),
                                 train_rpn=plan.train_rpn and plan.use_pseudo_labels,
                                 train_roi=plan.use_pseudo_labels,
                                 bg_weight_fn=bg_weight_fn,
                                 reg_reliable=reliable)
            if plan.use_pseudo_labels:
                u_cls.append(out.roi_cls)
                u_reg.append(out.roi_reg)
                u_rpn.append(out.rpn_obj + out.rpn_reg)
            if consistency_on:
                l_ent, l_iou = proposal_consistency_losses(
                    student=student, student_feats=out.feats,
                    teacher=teacher, teacher_feats=t_feats,
                    student_boxes=out.proposals, to_teacher=to_teacher,
                    teacher_wh=(view_w.width, view_w.height),
                    student_wh=(view_s.width, view_s.height),
                    top_n=ent["pair_top_n"], measure=ent["measure"],
                    overlap=ent["overlap"])
                ent_terms.append(l_ent)
                iou_terms.append(l_iou)

    l_sup_cls = _mean(sup_cls, dtype)
    l_sup_reg = _mean(sup_reg, dtype)
    rpn_sup = _mean(sup_rpn, dtype)
    l_cls_soft = _mean(u_cls, dtype)
    l_reg_soft = _mean(u_reg, dtype)
    rpn_unsup = _mean(u_rpn, dtype)
    l_ent = _mean(ent_terms, dtype)
    l_iou = _mean(iou_terms, dtype)
    l_sup = l_sup_cls + l_sup_reg

    total = l_sup + rpn_sup
    if alpha != 0.0:
        total = total + alpha * (l_cls_soft + l_reg_soft + rpn_unsup)
    if beta != 0.0:
        total = total + beta * (l_ent + l_iou)

    components = {
        "step": step, "L_sup": float(l_sup.detach()),
        "L_cls_soft": float(l_cls_soft.detach()),
        "L_reg_soft": float(l_reg_soft.detach()),
        "L_ent": float(l_ent.detach()), "L_iou": float(l_iou.detach()),
        "total": float(total.detach()), "lr": lr,
        "rpn_sup": float(rpn_sup.detach()), "rpn_unsup": float(rpn_unsup.detach()),
        "alpha": alpha, "beta": beta,
    }
    bad = {k: v for k, v in components.items() if not np.isfinite(v)}
    if bad:
        raise PipelineError(
            f"non-finite loss at {plan.name} step {step}: {bad}; "
            f"all components: {components}")

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    momentum = semi["ema_momentum"]
    if plan.name != "base_pretrain" and semi["ema_momentum_fewshot"] is not None:
        momentum = semi["ema_momentum_fewshot"]
    ema_update(teacher, student, momentum, only_trainable=True)
    return components


def run_stage(student: TwoStageDetector, teacher: TwoStageDetector,
              plan: StagePlan, data: StageData, cfg: dict,
              log: MetricsLog | None = None) -> dict[str, float] | None:
    """Train one stage end to end; returns the last step's components."""
    if not data.labeled:
        raise PipelineError(f"{plan.name}: no labeled examples")
    needs_unsup = plan.batch_unlabeled > 0 and (
        plan.use_pseudo_labels or plan.use_proposal_consistency)
    if needs_unsup and not data.unlabeled_ids:
        raise PipelineError(f"{plan.name}: unlabeled batch requested but the "
                            "unlabeled pool is empty")
    params = apply_freeze_policy(student, plan.trainable)
    sched = cfg["schedule"]
    optimizer = torch.optim.SGD(params, lr=plan.lr, momentum=sched["momentum"],
                                weight_decay=sched["weight_decay"])
    recipes = {branch: recipe_from_config(branch, cfg["augment"])
               for branch in ("labeled", "strong", "weak")}
    last = None
    log_every = max(1, int(sched["log_every"]))
    for step in range(plan.steps):
        last = train_step(student, teacher, optimizer, plan, data, cfg,
                          recipes, step)
        if log is not None and (step % log_every == 0 or step == plan.steps - 1):
            log.append(last)
    return last


# ---- checkpoints -----------------------------------------------------------

def save_training_checkpoint(path, student: TwoStageDetector,
                             teacher: TwoStageDetector, *, stage: str,
                             cfg: dict, base_class_ids, novel_class_ids,
                             iteration: int) -> Path:
    arrays = {f"student/{k}": v for k, v in state_arrays(student).items()}
    arrays.update({f"teacher/{k}": v for k, v in state_arrays(teacher).items()})
    metadata = {
        "stage": stage,
        "iteration": int(iteration),
        "config_hash": config_hash(cfg),
        "base_class_ids": [int(c) for c in base_class_ids],
        "novel_class_ids": [int(c) for c in novel_class_ids],
        "detector": dict(cfg["detector"]),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, arrays, metadata)
    return path


def _branch_arrays(arrays: dict[str, np.ndarray], branch: str) -> dict[str, np.ndarray]:
    prefix = branch + "/"
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def load_training_checkpoint(path) -> tuple[TwoStageDetector, TwoStageDetector, dict]:
    arrays, meta = load_checkpoint(path)
    mapping = checkpoint_mapping(meta)
    student_arrays = _branch_arrays(arrays, "student")
    teacher_arrays = _branch_arrays(arrays, "teacher")
    if not student_arrays:
        raise PipelineError(f"checkpoint {path} has no student parameters")
    if not teacher_arrays:
        raise PipelineError(f"checkpoint {path} has no teacher parameters")
    student = detector_from_config(meta["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    teacher = detector_from_config(meta["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    load_state_arrays(student, student_arrays)
    load_state_arrays(teacher, teacher_arrays)
    freeze_parameters(teacher)
    return student, teacher, meta


def checkpoint_mapping(meta: dict) -> ClassMapping:
    # ids are stored in contiguous-index order; never re-sort them
    return ClassMapping(tuple(int(c) for c in meta["base_class_ids"])
                        + tuple(int(c) for c in meta["novel_class_ids"]))


# ---- few-shot head expansion -------------------------------------------------

def expand_classifier_head(arrays: dict[str, np.ndarray], num_base: int,
                           num_novel: int, *, mode: str, std: float,
                           seed: int) -> dict[str, np.ndarray]:
    """Grow the final classifier layer from num_base to num_base+num_novel
    foreground classes. Existing foreground rows are copied byte-for-byte,
    the background row moves to stay last, and the new rows are seeded:
    `random` draws N(0, std) weights, `continue` re-draws them at the fresh
    classifier scale. New biases are zero either way."""
    if num_novel < 1:
        raise PipelineError("head expansion needs at least one new class")
    if mode not in ("random", "continue"):
        raise PipelineError(f"unknown novel-class init mode {mode!r}")
    sigma = std if mode == "random" else 0.01
    out = dict(arrays)
    for name in ("roi_classifier.head.weight", "roi_classifier.head.bias"):
        arr = arrays.get(name)
        if arr is None:
            raise PipelineError(f"checkpoint lacks classifier parameter {name}")
        if arr.shape[0] != num_base + 1:
            raise PipelineError(f"{name} has {arr.shape[0]} rows; expected "
                                f"{num_base + 1} (foreground + background)")
        new_shape = (num_base + num_novel + 1,) + arr.shape[1:]
        grown = np.zeros(new_shape, dtype=arr.dtype)
        grown[:num_base] = arr[:num_base]
        grown[-1] = arr[num_base]  # background row keeps its values, stays last
        if arr.ndim >= 2:
            rng = stream(seed, "novel_init", name)
            grown[num_base:num_base + num_novel] = rng.normal(
                0.0, sigma, size=(num_novel,) + arr.shape[1:]).astype(arr.dtype)
        out[name] = grown
    return out


def init_few_shot_from_teacher(ckpt_path, cfg: dict,
                               novel_class_ids) -> tuple[TwoStageDetector, TwoStageDetector, ClassMapping, dict]:
    """Student/teacher pair for the few-shot stages, seeded from the teacher
    branch of a base checkpoint, with the classifier grown to cover the novel
    classes. Base-class rows carry over byte-for-byte."""
    arrays, meta = load_checkpoint(ckpt_path)
    teacher_arrays = _branch_arrays(arrays, "teacher")
    if not teacher_arrays:
        raise PipelineError(f"checkpoint {ckpt_path} has no teacher branch; "
                            "few-shot stages are seeded from the teacher")
    base_ids = list(meta["base_class_ids"]) + list(meta["novel_class_ids"])
    novel = sorted(int(c) for c in novel_class_ids)
    overlap = set(base_ids) & set(novel)
    if overlap:
        raise PipelineError(f"novel classes already in the checkpoint: {sorted(overlap)}")
    if not novel:
        raise PipelineError("no novel classes to add")
    # keep the checkpoint's row order for existing classes; append novel sorted
    mapping = ClassMapping(tuple(int(c) for c in base_ids) + tuple(novel))
    expanded = expand_classifier_head(teacher_arrays, len(base_ids), len(novel),
                                      mode=cfg["eval"]["novel_init"],
                                      std=cfg["eval"]["novel_init_std"],
                                      seed=cfg["seed"])
    student = detector_from_config(meta["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    load_state_arrays(student, expanded)
    teacher = detector_from_config(meta["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    copy_parameters(teacher, student)
    freeze_parameters(teacher)
    return student, teacher, mapping, meta


# ---- stage entry points ------------------------------------------------------

def pretrain_base(cfg: dict, index: DatasetIndex, split: FewShotSplit,
                  out_dir) -> Path:
    """Stage 1: train on base classes, a fraction of images labeled."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mapping = class_mapping(split.base_class_ids)
    student = detector_from_config(cfg["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    init_parameters(student, cfg["seed"])
    teacher = detector_from_config(cfg["detector"],
                                   num_foreground_classes=mapping.num_foreground)
    copy_parameters(teacher, student)
    freeze_parameters(teacher)

    labeled_ids, unlabeled_ids = sample_labeled_fraction(
        index, cfg["split"]["labeled_percent"], cfg["split"]["seed"])
    if not cfg["dataset"]["unlabeled_from_train"]:
        unlabeled_ids = []
    data = StageData(index, mapping,
                     tuple(LabeledExample(i) for i in labeled_ids),
                     tuple(unlabeled_ids))
    plan = build_stage_plan(cfg, "base_pretrain")
    log = MetricsLog(out_dir / "metrics_base_pretrain.csv", METRIC_FIELDS)
    run_stage(student, teacher, plan, data, cfg, log=log)
    return save_training_checkpoint(
        out_dir / "checkpoint_base_pretrain.ckpt", student, teacher,
        stage="base_pretrain", cfg=cfg,
        base_class_ids=split.base_class_ids, novel_class_ids=(),
        iteration=plan.steps)


def train_novel_head(cfg: dict, index: DatasetIndex, split: FewShotSplit,
                     ckpt_path, out_dir) -> Path:
    """Stage 2: extend the classifier to novel classes and train both box
    heads on the novel shots (optionally plus base shots) and the unlabeled
    pool; everything else stays frozen."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    student, teacher, mapping, meta = init_few_shot_from_teacher(
        ckpt_path, cfg, split.novel_class_ids)
    shot_classes = list(split.novel_class_ids)
    if cfg["schedule"]["novel_head_includes_base"]:
        shot_classes = list(split.base_class_ids) + shot_classes
    examples = shot_examples(split, shot_classes)
    shot_images = {ex.image_id for ex in examples}
    unlabeled_ids = tuple(i for i in index.image_ids if i not in shot_images) \
        if cfg["dataset"]["unlabeled_from_train"] else ()
    data = StageData(index, mapping, examples, unlabeled_ids)
    plan = build_stage_plan(cfg, "novel_head")
    log = MetricsLog(out_dir / "metrics_novel_head.csv", METRIC_FIELDS)
    if plan.steps > 0:
        run_stage(student, teacher, plan, data, cfg, log=log)
    return save_training_checkpoint(
        out_dir / "checkpoint_novel_head.ckpt", student, teacher,
        stage="novel_head", cfg=cfg,
        base_class_ids=meta["base_class_ids"] + meta["novel_class_ids"],
        novel_class_ids=split.novel_class_ids, iteration=plan.steps)


def finetune_balanced(cfg: dict, index: DatasetIndex, split: FewShotSplit,
                      ckpt_path, out_dir) -> Path:
    """Stage 3: fine-tune on the balanced shot set (same count per class).
    By default only the classifier trains; the trainable set is configurable
    for ablations."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    student, teacher, meta = load_training_checkpoint(ckpt_path)
    mapping = checkpoint_mapping(meta)
    expected = set(split.base_class_ids) | set(split.novel_class_ids)
    if set(mapping.dataset_ids) != expected:
        raise PipelineError(
            f"checkpoint classes {sorted(mapping.dataset_ids)} do not match "
            f"the split's base+novel classes {sorted(expected)}")
    counts = {cid: len(split.shot_instances.get(cid, ()))
              for cid in mapping.dataset_ids}
    unbalanced = {cid: n for cid, n in counts.items() if n != split.k}
    if unbalanced:
        raise PipelineError(f"fine-tuning set is not balanced: expected "
                            f"{split.k} shots per class, got {unbalanced}")
    examples = shot_examples(split, mapping.dataset_ids)
    plan = build_stage_plan(cfg, "balanced_finetune")
    unlabeled_ids = ()
    if plan.batch_unlabeled > 0 and cfg["dataset"]["unlabeled_from_train"]:
        shot_images = {ex.image_id for ex in examples}
        unlabeled_ids = tuple(i for i in index.image_ids if i not in shot_images)
    data = StageData(index, mapping, examples, unlabeled_ids)
    log = MetricsLog(out_dir / "metrics_balanced_finetune.csv", METRIC_FIELDS)
    if plan.steps > 0:
        run_stage(student, teacher, plan, data, cfg, log=log)
    return save_training_checkpoint(
        out_dir / "checkpoint_balanced_finetune.ckpt", student, teacher,
        stage="balanced_finetune", cfg=cfg,
        base_class_ids=meta["base_class_ids"],
        novel_class_ids=meta["novel_class_ids"], iteration=plan.steps)


# ---- evaluation entry point --------------------------------------------------

def evaluate_trained(ckpt_path, index: DatasetIndex, cfg: dict, *,
                     image_ids=None, base_ap_pretrain: float | None = None,
                     branch: str = "teacher") -> EvalReport:
    """Evaluate a training checkpoint; the teacher branch by default, since
    it is the averaged model every stage hands forward."""
    if branch not in ("teacher", "student"):
        raise PipelineError(f"unknown branch {branch!r}")
    student, teacher, meta = load_training_checkpoint(ckpt_path)
    model = teacher if branch == "teacher" else student
    mapping = checkpoint_mapping(meta)
    det = cfg["detector"]
    return evaluate_model(
        model, index, mapping,
        base_ids=meta["base_class_ids"], novel_ids=meta["novel_class_ids"],
        image_ids=image_ids,
        test_short_edge=cfg["augment"]["test_short_edge"],
        proposal_counts=tuple(cfg["eval"]["proposal_counts"]),
        score_thresh=det["score_thresh"], nms_thresh=det["test_nms_thresh"],
        max_detections=det["max_detections"], top_n=det["top_n_proposals"],
        base_ap_pretrain=base_ap_pretrain)
