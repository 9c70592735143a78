"""Dataset-level evaluation glue: run a detector over an annotation index.

Images are resized to a fixed test short edge before inference; predicted
boxes and proposals are mapped back through the inverse view transform, so
every reported coordinate lives in the original image frame and every class
id is a dataset category id. Reports combine per-class average precision,
per-class detection recall, and class-agnostic proposal recall at several
budgets.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import deterministic_resize_view
from .data import ClassMapping, DatasetIndex
from .geometry import Box, ScoredBox, apply_affine
from .metrics import (EvalReport, average_recall, evaluate_detection_recall,
                      evaluate_detections, generalized_report)


class EvaluationError(ValueError):
    pass


def load_image(path) -> np.ndarray:
    """Image file -> uint8 HxWx3 RGB array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def detect_image(model, image: np.ndarray, mapping: ClassMapping, *,
                 test_short_edge: int, score_thresh: float = 0.05,
                 nms_thresh: float = 0.5, max_detections: int = 100,
                 top_n: int = 512) -> list[ScoredBox]:
    """Detections for one image, in original coordinates and dataset ids."""
    view = deterministic_resize_view(image, test_short_edge)
    dets = model.detect(view.image, score_thresh=score_thresh,
                        nms_thresh=nms_thresh, max_detections=max_detections,
                        top_n=top_n)
    back = view.transform.invert()
    h0, w0 = image.shape[:2]
    out: list[ScoredBox] = []
    for sb in dets:
        box = apply_affine(back, sb.box).clip(float(w0), float(h0))
        if box.width <= 0 or box.height <= 0:
            continue
        out.append(ScoredBox(box, sb.score, mapping.dataset(sb.class_id)))
    return out


def propose_image(model, image: np.ndarray, *, test_short_edge: int,
                  max_proposals: int | None = None) -> list[tuple[Box, float]]:
    """Region proposals for one image, in original coordinates, sorted by
    descending objectness."""
    view = deterministic_resize_view(image, test_short_edge)
    props = model.forward_rpn(view.image, max_proposals=max_proposals)
    back = view.transform.invert()
    h0, w0 = image.shape[:2]
    out: list[tuple[Box, float]] = []
    for box, score in props:
        mapped = apply_affine(back, box).clip(float(w0), float(h0))
        if mapped.width <= 0 or mapped.height <= 0:
            continue
        out.append((mapped, float(score)))
    return out


def detect_dataset(model, index: DatasetIndex, image_ids, mapping: ClassMapping, *,
                   test_short_edge: int, score_thresh: float = 0.05,
                   nms_thresh: float = 0.5, max_detections: int = 100,
                   top_n: int = 512) -> dict[int, list[ScoredBox]]:
    out: dict[int, list[ScoredBox]] = {}
    for image_id in image_ids:
        image = load_image(index.image_path(image_id))
        out[image_id] = detect_image(
            model, image, mapping, test_short_edge=test_short_edge,
            score_thresh=score_thresh, nms_thresh=nms_thresh,
            max_detections=max_detections, top_n=top_n)
    return out


def propose_dataset(model, index: DatasetIndex, image_ids, *,
                    test_short_edge: int,
                    max_proposals: int | None = None) -> dict[int, list[tuple[Box, float]]]:
    out: dict[int, list[tuple[Box, float]]] = {}
    for image_id in image_ids:
        image = load_image(index.image_path(image_id))
        out[image_id] = propose_image(model, image,
                                      test_short_edge=test_short_edge,
                                      max_proposals=max_proposals)
    return out


def ground_truth_by_image(index: DatasetIndex, image_ids,
                          class_ids=None) -> dict[int, list[tuple[Box, int]]]:
    """Annotations per image as (box, class_id), optionally class-filtered."""
    keep = None if class_ids is None else set(class_ids)
    out: dict[int, list[tuple[Box, int]]] = {}
    for image_id in image_ids:
        anns = index.annotations_for(image_id)
        out[image_id] = [(a.box, a.class_id) for a in anns
                         if keep is None or a.class_id in keep]
    return out


def evaluate_model(model, index: DatasetIndex, mapping: ClassMapping, *,
                   base_ids, novel_ids=(), image_ids=None,
                   test_short_edge: int, proposal_counts=(100, 300, 1000),
                   score_thresh: float = 0.05, nms_thresh: float = 0.5,
                   max_detections: int = 100, top_n: int = 512,
                   base_ap_pretrain: float | None = None) -> EvalReport:
    """Full evaluation pass over `image_ids` (default: every image).

    Detection AP and detection recall are computed per class over the
    mapping's classes; proposal recall is class-agnostic against the same
    ground truth, at each requested proposal budget.
    """
    known = set(mapping.dataset_ids)
    outside = (set(base_ids) | set(novel_ids)) - known
    if outside:
        raise EvaluationError(f"report classes not in the mapping: {sorted(outside)}")
    ids = list(index.image_ids if image_ids is None else image_ids)
    dets = detect_dataset(model, index, ids, mapping,
                          test_short_edge=test_short_edge,
                          score_thresh=score_thresh, nms_thresh=nms_thresh,
                          max_detections=max_detections, top_n=top_n)
    gts = ground_truth_by_image(index, ids, mapping.dataset_ids)
    per_class_ap = evaluate_detections(dets, gts, list(mapping.dataset_ids))
    per_class_recall = evaluate_detection_recall(dets, gts, list(mapping.dataset_ids))

    ar_at: dict[int, float] = {}
    if proposal_counts:
        budget = max(int(p) for p in proposal_counts)
        props = propose_dataset(model, index, ids,
                                test_short_edge=test_short_edge,
                                max_proposals=budget)
        per_image = [([box for box, _ in props[i]], [box for box, _ in gts[i]])
                     for i in ids]
        ar_at = {int(p): average_recall(per_image, int(p)) for p in proposal_counts}

    return generalized_report(per_class_ap, base_ids, novel_ids, ar_at=ar_at,
                              per_class_detection_recall=per_class_recall,
                              base_ap_pretrain=base_ap_pretrain)


def save_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    return path


def load_report(path) -> EvalReport:
    return EvalReport.from_json(json.loads(Path(path).read_text()))


def write_proposal_dump(path, proposals_by_image: dict[int, list[tuple[Box, float]]]) -> Path:
    """One JSON object per line: {image_id, box, score}, images in id order,
    proposals in their stored (descending-score) order."""
    path = Path(path)
    with open(path, "w") as f:
        for image_id in sorted(proposals_by_image):
            for box, score in proposals_by_image[image_id]:
                f.write(json.dumps({"image_id": int(image_id),
                                    "box": [box.x1, box.y1, box.x2, box.y2],
                                    "score": float(score)}) + "\n")
    return path


def read_proposal_dump(path) -> dict[int, list[tuple[Box, float]]]:
    out: dict[int, list[tuple[Box, float]]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        doc = json.loads(line)
        out.setdefault(int(doc["image_id"]), []).append(
            (Box(*doc["box"]), float(doc["score"])))
    return out
