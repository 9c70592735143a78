"""Teacher-student training mechanics.

The teacher is a slow exponential-moving-average copy of the student. It
labels weakly-augmented unlabeled images; detections above a confidence
threshold become pseudo ground truth for the student's strongly-augmented
view. Each pseudo box is additionally jittered and re-refined by the
teacher's box head: boxes whose refined coordinates scatter too much are
kept for classification but excluded from regression supervision, and the
mean refined box replaces the raw detection. Background proposals on
unlabeled images are down-weighted by the teacher's own background
confidence so that unreliable negatives contribute little.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .detector import TwoStageDetector
from .geometry import AffineTransform, Box, apply_affine_boxes


class SemiSupError(ValueError):
    """Raised for invalid teacher-student configuration or inputs."""


@dataclass(frozen=True)
class PseudoLabel:
    """A teacher detection promoted to training target status."""

    box: Box
    class_id: int
    score: float
    reg_reliable: bool


# ---- teacher weight maintenance -------------------------------------------

def ema_update(teacher: TwoStageDetector, student: TwoStageDetector,
               momentum: float, only_trainable: bool = False) -> None:
    """In-place teacher <- momentum * teacher + (1 - momentum) * student.

    With only_trainable, parameters the student holds frozen
    (requires_grad False) are skipped entirely, so the teacher's copies of
    frozen groups stay bitwise-unchanged rather than drifting by rounding.
    """
    if not 0.0 <= momentum <= 1.0:
        raise SemiSupError(f"momentum outside [0, 1]: {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise SemiSupError("teacher and student parameter names differ")
    with torch.no_grad():
        for name, tp in t_params.items():
            sp = s_params[name]
            if tp.shape != sp.shape:
                raise SemiSupError(f"shape mismatch for {name}")
            if only_trainable and not sp.requires_grad:
                continue
            tp.mul_(momentum).add_(sp.to(tp.dtype), alpha=1.0 - momentum)


def copy_parameters(dst: TwoStageDetector, src: TwoStageDetector) -> None:
    """Hard copy of all src parameters into dst (same architecture)."""
    ema_update(dst, src, momentum=0.0)


def freeze_parameters(model: TwoStageDetector) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


# ---- pseudo-label generation ----------------------------------------------

def retain_by_score(detections, tau: float) -> list:
    """Detections with score >= tau, order preserved."""
    return [d for d in detections if d.score >= tau]


def jitter_boxes(boxes: np.ndarray, n: int, amplitude: float,
                 rng: np.random.Generator) -> np.ndarray:
    """(N, 4) boxes -> (N, n, 4) copies with each corner coordinate shifted
    by an independent uniform draw in +-amplitude of the box width/height."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if n < 1:
        raise SemiSupError(f"jitter count must be >= 1: {n}")
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    scale = np.stack([w, h, w, h], axis=1)
    offsets = rng.uniform(-amplitude, amplitude, size=(len(boxes), n, 4))
    return boxes[:, None, :] + offsets * scale[:, None, :]


def box_jitter_refine(model: TwoStageDetector, feats, image_hw: tuple[int, int],
                      boxes: np.ndarray, n_jitter: int, amplitude: float,
                      rng: np.random.Generator):
    """Refine each box through the box head from n jittered starting points.

    Returns (mean refined boxes (N, 4), spread (N,)) where spread is the
    per-coordinate standard deviation of the refined boxes normalized by
    half the source box width/height, averaged over the four coordinates.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return boxes.copy(), np.zeros(0, dtype=np.float64)
    jittered = jitter_boxes(boxes, n_jitter, amplitude, rng)
    flat = torch.tensor(jittered.reshape(-1, 4), dtype=model.dtype)
    with torch.no_grad():
        pred = model.roi_predict(feats, flat)
        refined = pred.boxes.double().numpy().reshape(len(boxes), n_jitter, 4)
    h, w = image_hw
    refined[..., 0::2] = refined[..., 0::2].clip(0.0, float(w))
    refined[..., 1::2] = refined[..., 1::2].clip(0.0, float(h))
    mean = refined.mean(axis=1)
    sigma = refined.std(axis=1)
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    denom = 0.5 * np.stack([bw, bh, bw, bh], axis=1)
    spread = (sigma / np.maximum(denom, 1e-12)).mean(axis=1)
    return mean, spread


def generate_pseudo_labels(model: TwoStageDetector, image: np.ndarray, *,
                           tau_cls: float, tau_var: float, n_jitter: int,
                           jitter_amplitude: float, rng: np.random.Generator,
                           score_thresh: float = 0.05, nms_thresh: float = 0.5,
                           max_detections: int = 100,
                           top_n: int = 512) -> list[PseudoLabel]:
    """Detect on `image`, keep detections scoring >= tau_cls, refine boxes by
    jitter consensus, and flag regression reliability by refined-box spread."""
    with torch.no_grad():
        detections = model.detect(image, score_thresh=score_thresh,
                                  nms_thresh=nms_thresh,
                                  max_detections=max_detections, top_n=top_n)
        kept = retain_by_score(detections, tau_cls)
        if not kept:
            return []
        t = model.image_to_tensor(image)
        feats = model.features(t)
        h, w = t.shape[-2:]
        arr = np.array([[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in kept],
                       dtype=np.float64)
        refined, spread = box_jitter_refine(model, feats, (int(h), int(w)), arr,
                                            n_jitter, jitter_amplitude, rng)
    out = []
    for det, rbox, sp in zip(kept, refined, spread):
        out.append(PseudoLabel(box=Box(*rbox.tolist()), class_id=det.class_id,
                               score=det.score, reg_reliable=bool(sp < tau_var)))
    return out


def map_pseudo_labels(labels: list[PseudoLabel], transform: AffineTransform,
                      view_wh: tuple[float, float] | None = None,
                      min_size: float = 1.0) -> list[PseudoLabel]:
    """Carry pseudo labels into another view of the same image.

    Boxes are mapped through `transform` (axis-aligned hull), optionally
    clipped to the destination view, and dropped when a side falls below
    min_size pixels."""
    if not labels:
        return []
    arr = np.array([[p.box.x1, p.box.y1, p.box.x2, p.box.y2] for p in labels],
                   dtype=np.float64)
    mapped = apply_affine_boxes(transform, arr)
    out = []
    for pl, row in zip(labels, mapped):
        box = Box(*row.tolist())
        if view_wh is not None:
            box = box.clip(view_wh[0], view_wh[1])
        if box.width < min_size or box.height < min_size:
            continue
        out.append(replace(pl, box=box))
    return out


# ---- reliability-weighted background --------------------------------------

def background_reliability(model: TwoStageDetector, feats,
                           boxes: np.ndarray) -> np.ndarray:
    """Model's background softmax probability for each box, as (N,) float64."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.float64)
    with torch.no_grad():
        pred = model.roi_predict(feats, torch.tensor(boxes, dtype=model.dtype))
        probs = torch.softmax(pred.logits, dim=1)
        return probs[:, -1].double().numpy()


def unsup_weight(num_unlabeled: int, num_labeled: int) -> float:
    """Unlabeled-loss weight: the unlabeled:labeled batch size ratio."""
    if num_unlabeled < 0 or num_labeled < 0:
        raise SemiSupError("batch sizes must be non-negative")
    if num_unlabeled == 0:
        return 0.0
    if num_labeled == 0:
        raise SemiSupError("cannot weight unlabeled loss with an empty labeled batch")
    return num_unlabeled / num_labeled
