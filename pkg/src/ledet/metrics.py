"""Detection quality metrics: interpolated average precision, proposal
average recall, and split-aware report assembly.

Matching is greedy and one-to-one: detections are visited in descending
score order and each claims the unclaimed ground-truth box of highest
overlap at or above the threshold. Average precision uses 101-point
interpolation over recall 0.00, 0.01, ..., 1.00. Classes without ground
truth are excluded from means (NaN per class).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, ScoredBox, iou_matrix

IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


class MetricsError(ValueError):
    """Raised for malformed metric inputs."""


def match_detections(detections: list[tuple[Box, float]], gt_boxes: list[Box],
                     iou_thr: float) -> list[tuple[float, bool]]:
    """Greedy one-to-one matching for a single image and class.

    Returns one (score, is_true_positive) pair per detection. Ties in
    score keep insertion order; ties in overlap go to the lower ground
    truth index.
    """
    if not detections:
        return []
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    if not gt_boxes:
        return [(detections[i][1], False) for i in order]
    det_arr = np.array([[d[0].x1, d[0].y1, d[0].x2, d[0].y2] for d in detections])
    gt_arr = np.array([[g.x1, g.y1, g.x2, g.y2] for g in gt_boxes])
    overlaps = iou_matrix(det_arr, gt_arr)
    free = np.ones(len(gt_boxes), dtype=bool)
    out = []
    for i in order:
        best_j, best_v = -1, -1.0
        for j in range(len(gt_boxes)):
            if free[j] and overlaps[i, j] >= iou_thr and overlaps[i, j] > best_v:
                best_j, best_v = j, overlaps[i, j]
        if best_j >= 0:
            free[best_j] = False
            out.append((detections[i][1], True))
        else:
            out.append((detections[i][1], False))
    return out


def average_precision(matches: list[tuple[float, bool]], num_gt: int) -> float:
    """101-point interpolated AP from pooled (score, is_tp) pairs."""
    if num_gt < 0:
        raise MetricsError(f"num_gt must be >= 0: {num_gt}")
    if num_gt == 0:
        return float("nan")
    if not matches:
        return 0.0
    ordered = sorted(matches, key=lambda m: -m[0])
    tp = np.cumsum([1.0 if m[1] else 0.0 for m in ordered])
    fp = np.cumsum([0.0 if m[1] else 1.0 for m in ordered])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope: best precision at any recall >= r
    levels = np.linspace(0.0, 1.0, 101)
    interp = np.zeros(101)
    for k, r in enumerate(levels):
        mask = recall >= r - 1e-12
        interp[k] = precision[mask].max() if mask.any() else 0.0
    return float(interp.mean())


def ap_for_class(per_image: list[tuple[list[tuple[Box, float]], list[Box]]],
                 iou_thr: float = 0.5) -> float:
    """Dataset AP for one class at a single overlap threshold."""
    pooled: list[tuple[float, bool]] = []
    num_gt = 0
    for dets, gts in per_image:
        pooled.extend(match_detections(dets, gts, iou_thr))
        num_gt += len(gts)
    return average_precision(pooled, num_gt)


def ap_over_thresholds(per_image, iou_thrs=IOU_GRID) -> float:
    """Dataset AP for one class, averaged over overlap thresholds."""
    vals = [ap_for_class(per_image, thr) for thr in iou_thrs]
    if any(math.isnan(v) for v in vals):
        return float("nan")
    return float(np.mean(vals))


def detection_recall_for_class(per_image, iou_thrs=IOU_GRID) -> float:
    """Dataset detection recall for one class: the fraction of ground-truth
    boxes claimed by the greedy matcher, averaged over overlap thresholds.
    Distinct from proposal recall: inputs are scored class detections."""
    recalls = []
    for thr in iou_thrs:
        claimed = total = 0
        for dets, gts in per_image:
            claimed += sum(1 for _, tp in match_detections(dets, gts, thr) if tp)
            total += len(gts)
        recalls.append(claimed / total if total else float("nan"))
    if any(math.isnan(r) for r in recalls):
        return float("nan")
    return float(np.mean(recalls))


def _per_image_class_pairs(dets_by_image: dict, gts_by_image: dict, cid: int):
    image_ids = sorted(set(dets_by_image) | set(gts_by_image))
    per_image = []
    for img in image_ids:
        dets = [(sb.box, sb.score) for sb in dets_by_image.get(img, [])
                if sb.class_id == cid]
        gts = [b for b, c in gts_by_image.get(img, []) if c == cid]
        per_image.append((dets, gts))
    return per_image


def evaluate_detections(dets_by_image: dict, gts_by_image: dict,
                        class_ids: list[int],
                        iou_thrs=IOU_GRID) -> dict[int, float]:
    """Per-class AP over a dataset, averaged over overlap thresholds.

    `dets_by_image` maps image id -> list of ScoredBox; `gts_by_image`
    maps image id -> list of (Box, class_id). Images present in either
    mapping are evaluated; missing entries mean no boxes there. Pass a
    single-element threshold tuple for fixed-threshold AP.
    """
    if isinstance(iou_thrs, float):
        iou_thrs = (iou_thrs,)
    out: dict[int, float] = {}
    for cid in class_ids:
        out[cid] = ap_over_thresholds(_per_image_class_pairs(dets_by_image, gts_by_image, cid),
                                      iou_thrs)
    return out


def evaluate_detection_recall(dets_by_image: dict, gts_by_image: dict,
                              class_ids: list[int],
                              iou_thrs=IOU_GRID) -> dict[int, float]:
    """Per-class detection recall over a dataset (see detection_recall_for_class)."""
    if isinstance(iou_thrs, float):
        iou_thrs = (iou_thrs,)
    return {cid: detection_recall_for_class(
        _per_image_class_pairs(dets_by_image, gts_by_image, cid), iou_thrs)
        for cid in class_ids}


def mean_over_classes(per_class: dict[int, float],
                      class_ids: list[int] | None = None) -> float:
    """Mean AP over the requested classes, skipping NaN entries."""
    ids = sorted(per_class) if class_ids is None else list(class_ids)
    vals = [per_class[c] for c in ids if c in per_class and not math.isnan(per_class[c])]
    if not vals:
        return float("nan")
    return float(np.mean(vals))


# ---- proposal recall --------------------------------------------------------

def proposal_recall(proposals: list[Box], gt_boxes: list[Box], k: int,
                    iou_thr: float) -> tuple[int, int]:
    """(claimed, total) ground truths using the first k proposals, greedy
    one-to-one in proposal order."""
    if not gt_boxes:
        return 0, 0
    dets = [(b, 1.0) for b in proposals[:k]]
    # equal scores keep proposal order, so greedy follows the given ranking
    matched = match_detections(dets, gt_boxes, iou_thr)
    return sum(1 for _, tp in matched if tp), len(gt_boxes)


def average_recall(per_image: list[tuple[list[Box], list[Box]]], k: int,
                   iou_thrs: tuple[float, ...] = IOU_GRID) -> float:
    """Mean over IoU thresholds of dataset-level recall at k proposals."""
    recalls = []
    for thr in iou_thrs:
        claimed = total = 0
        for proposals, gts in per_image:
            c, t = proposal_recall(proposals, gts, k, thr)
            claimed += c
            total += t
        recalls.append(claimed / total if total else float("nan"))
    vals = [r for r in recalls if not math.isnan(r)]
    if not vals:
        return float("nan")
    return float(np.mean(vals))


# ---- split-aware reporting --------------------------------------------------

def forgetting_pct(reference_ap: float, current_ap: float) -> float:
    """Relative drop from a reference AP, in percent."""
    if reference_ap <= 0:
        raise MetricsError(f"reference AP must be positive: {reference_ap}")
    return (reference_ap - current_ap) / reference_ap * 100.0


@dataclass(frozen=True)
class EvalReport:
    """Per-class AP plus split means; AR entries keyed by proposal budget.

    overall_ap is the mean over the union of base and novel per-class APs;
    forgetting_pct = 100 * (base_ap_pretrain - base_ap) / base_ap_pretrain
    when a pre-fine-tune reference is available.
    """

    per_class_ap: dict[int, float]
    base_class_ids: tuple[int, ...]
    novel_class_ids: tuple[int, ...]
    base_ap: float
    novel_ap: float
    overall_ap: float
    ar_at: dict[int, float] = field(default_factory=dict)
    per_class_detection_recall: dict[int, float] = field(default_factory=dict)
    base_ap_pretrain: float | None = None
    forgetting_pct: float | None = None

    def lines(self) -> list[str]:
        out = [f"overall AP {self.overall_ap:.4f}",
               f"base AP {self.base_ap:.4f} over classes {list(self.base_class_ids)}",
               f"novel AP {self.novel_ap:.4f} over classes {list(self.novel_class_ids)}"]
        for cid in sorted(self.per_class_ap):
            out.append(f"  class {cid}: AP {self.per_class_ap[cid]:.4f}")
        for k in sorted(self.ar_at):
            out.append(f"proposal AR@{k} {self.ar_at[k]:.4f}")
        if self.forgetting_pct is not None:
            out.append(f"base AP before fine-tune {self.base_ap_pretrain:.4f}")
            out.append(f"base forgetting {self.forgetting_pct:.1f}%")
        return out

    def to_json(self) -> dict:
        return {
            "per_class_ap": {str(k): self.per_class_ap[k] for k in sorted(self.per_class_ap)},
            "base_class_ids": list(self.base_class_ids),
            "novel_class_ids": list(self.novel_class_ids),
            "base_ap": self.base_ap,
            "novel_ap": self.novel_ap,
            "overall_ap": self.overall_ap,
            "ar_at": {str(k): self.ar_at[k] for k in sorted(self.ar_at)},
            "per_class_detection_recall": {
                str(k): self.per_class_detection_recall[k]
                for k in sorted(self.per_class_detection_recall)},
            "base_ap_pretrain": self.base_ap_pretrain,
            "forgetting_pct": self.forgetting_pct,
        }

    @staticmethod
    def from_json(doc: dict) -> "EvalReport":
        return EvalReport(
            per_class_ap={int(k): v for k, v in doc["per_class_ap"].items()},
            base_class_ids=tuple(doc["base_class_ids"]),
            novel_class_ids=tuple(doc["novel_class_ids"]),
            base_ap=doc["base_ap"], novel_ap=doc["novel_ap"],
            overall_ap=doc["overall_ap"],
            ar_at={int(k): v for k, v in doc["ar_at"].items()},
            per_class_detection_recall={
                int(k): v for k, v in doc.get("per_class_detection_recall", {}).items()},
            base_ap_pretrain=doc.get("base_ap_pretrain"),
            forgetting_pct=doc.get("forgetting_pct"))


def generalized_report(per_class_ap: dict[int, float], base_ids, novel_ids,
                       ar_at: dict[int, float] | None = None,
                       per_class_detection_recall: dict[int, float] | None = None,
                       base_ap_pretrain: float | None = None) -> EvalReport:
    """Assemble the split-aware evaluation summary.

    When `base_ap_pretrain` is given (the base-stage model's base AP), the
    report carries the relative base-class degradation in percent.
    """
    base_ids = tuple(sorted(base_ids))
    novel_ids = tuple(sorted(novel_ids))
    if set(base_ids) & set(novel_ids):
        raise MetricsError("base and novel class sets overlap")
    base_ap = mean_over_classes(per_class_ap, list(base_ids))
    novel_ap = mean_over_classes(per_class_ap, list(novel_ids))
    overall = mean_over_classes(per_class_ap, sorted(set(base_ids) | set(novel_ids)))
    forget = None
    if base_ap_pretrain is not None and not math.isnan(base_ap):
        forget = forgetting_pct(base_ap_pretrain, base_ap)
    return EvalReport(per_class_ap=dict(per_class_ap), base_class_ids=base_ids,
                      novel_class_ids=novel_ids, base_ap=base_ap,
                      novel_ap=novel_ap, overall_ap=overall,
                      ar_at=dict(ar_at or {}),
                      per_class_detection_recall=dict(per_class_detection_recall or {}),
                      base_ap_pretrain=base_ap_pretrain, forgetting_pct=forget)
