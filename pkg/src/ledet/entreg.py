"""Proposal-consistency objectives on region proposals.

Beyond pseudo-box supervision, the student is asked to agree with the
teacher on raw region proposals from unlabeled images: for each proposal
visible in both views, the student's class distribution should match the
teacher's (an entropy-style similarity on softmax outputs) and the
student's refined box should overlap the teacher's refined box. Both
terms consider only proposals the teacher believes are foreground; the
overlap term is normalized by the full pair count, so all-background
pairs contribute a constant with no gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .detector import TwoStageDetector
from .geometry import AffineTransform, aligned_overlap, apply_affine_boxes

MEASURES = ("cross_entropy", "kl")
OVERLAPS = ("iou", "giou")


class EntRegError(ValueError):
    """Raised for invalid proposal-consistency configuration or inputs."""


def foreground_weights(teacher_logits: torch.Tensor) -> torch.Tensor:
    """1.0 where the teacher's argmax class is not background (last index),
    else 0.0; ties resolve to the lower class index. Detached."""
    logits = teacher_logits.detach()
    if logits.ndim != 2:
        raise EntRegError(f"expected (N, C) logits, got shape {tuple(logits.shape)}")
    background = logits.shape[1] - 1
    return (logits.argmax(dim=1) != background).to(logits.dtype)


def entropy_similarity_loss(student_logits: torch.Tensor,
                            teacher_logits: torch.Tensor,
                            measure: str = "cross_entropy") -> torch.Tensor:
    """Class-averaged distribution mismatch between teacher and student,
    weight-averaged over teacher-foreground pairs.

    Per pair: -(1/C) sum_c g_c(teacher) * log g_c(student) for the
    cross-entropy measure, or the KL divergence from student to teacher
    distribution divided by C for the kl measure. Pairs whose teacher
    argmax is background get weight zero; the result is the weighted sum
    over pairs divided by the weight sum (zero when no pair is foreground).
    """
    if measure not in MEASURES:
        raise EntRegError(f"unknown measure {measure!r}; expected one of {MEASURES}")
    if student_logits.shape != teacher_logits.shape:
        raise EntRegError("student and teacher logits must have the same shape")
    if student_logits.ndim != 2:
        raise EntRegError(f"expected (N, C) logits, got shape {tuple(student_logits.shape)}")
    if student_logits.shape[0] == 0:
        return student_logits.sum() * 0.0
    teacher = teacher_logits.detach().to(student_logits.dtype)
    c = student_logits.shape[1]
    g_t = torch.softmax(teacher, dim=1)
    log_g_s = torch.log_softmax(student_logits, dim=1)
    per_pair = -(g_t * log_g_s).sum(dim=1) / c
    if measure == "kl":
        log_g_t = torch.log_softmax(teacher, dim=1)
        per_pair = per_pair + (g_t * log_g_t).sum(dim=1) / c
    w = foreground_weights(teacher)
    wsum = w.sum()
    if wsum.item() == 0.0:
        return student_logits.sum() * 0.0
    return (w * per_pair).sum() / wsum


def iou_consistency_loss(student_boxes: torch.Tensor, teacher_boxes: torch.Tensor,
                         weights: torch.Tensor, kind: str = "iou") -> torch.Tensor:
    """One minus the mean weighted overlap between the student's refined
    boxes and the teacher's refined boxes, normalized by the number of
    pairs (not the weight sum). Empty input gives zero."""
    if kind not in OVERLAPS:
        raise EntRegError(f"unknown overlap {kind!r}; expected one of {OVERLAPS}")
    if student_boxes.shape != teacher_boxes.shape:
        raise EntRegError("student and teacher boxes must have the same shape")
    n = student_boxes.shape[0]
    if n == 0:
        return student_boxes.sum() * 0.0
    overlap = aligned_overlap(student_boxes, teacher_boxes.detach().to(student_boxes.dtype),
                              kind=kind)
    w = weights.detach().to(student_boxes.dtype)
    return 1.0 - (w * overlap).sum() / n


# ---- pairing proposals across views ----------------------------------------

def pair_proposals(student_boxes: np.ndarray, to_teacher: AffineTransform,
                   teacher_wh: tuple[float, float], top_n: int,
                   min_size: float = 1.0):
    """Pair the first top_n student proposals with their teacher-view images.

    Student proposals must already be score-sorted. Each box is mapped
    through `to_teacher` (axis-aligned hull) and clipped to the teacher
    view; pairs whose mapped box loses a side below min_size are dropped.
    Returns (student (M, 4), teacher (M, 4), kept indices (M,)) float64/int64.
    """
    if top_n < 0:
        raise EntRegError(f"top_n must be >= 0: {top_n}")
    boxes = np.asarray(student_boxes, dtype=np.float64).reshape(-1, 4)[:top_n]
    if len(boxes) == 0:
        empty = np.zeros((0, 4), dtype=np.float64)
        return empty, empty.copy(), np.zeros(0, dtype=np.int64)
    mapped = apply_affine_boxes(to_teacher, boxes)
    tw, th = float(teacher_wh[0]), float(teacher_wh[1])
    mapped[:, 0::2] = mapped[:, 0::2].clip(0.0, tw)
    mapped[:, 1::2] = mapped[:, 1::2].clip(0.0, th)
    ok = ((mapped[:, 2] - mapped[:, 0] >= min_size)
          & (mapped[:, 3] - mapped[:, 1] >= min_size))
    idx = np.nonzero(ok)[0].astype(np.int64)
    return boxes[idx].copy(), mapped[idx].copy(), idx


def proposal_consistency_losses(*, student: TwoStageDetector, student_feats,
                                teacher: TwoStageDetector, teacher_feats,
                                student_boxes: np.ndarray,
                                to_teacher: AffineTransform,
                                teacher_wh: tuple[float, float],
                                student_wh: tuple[float, float],
                                top_n: int, measure: str = "cross_entropy",
                                overlap: str = "iou"):
    """Both proposal-consistency terms for one unlabeled image.

    The student's score-sorted proposals are paired into the teacher view;
    each model's box head refines its own copy, the teacher under no_grad.
    The teacher's refined boxes are mapped back into the student view and
    clipped before the overlap term. Returns (similarity, overlap) scalars
    in the student's dtype; both zero when no pairs survive.
    """
    s_np, t_np, _ = pair_proposals(student_boxes, to_teacher, teacher_wh, top_n)
    if len(s_np) == 0:
        zero = torch.zeros((), dtype=student.dtype)
        return zero, zero.clone()
    with torch.no_grad():
        t_pred = teacher.roi_predict(teacher_feats,
                                     torch.tensor(t_np, dtype=teacher.dtype))
        t_logits = t_pred.logits.to(student.dtype)
        t_refined = apply_affine_boxes(to_teacher.invert(),
                                       t_pred.boxes.double().numpy())
        sw, sh = float(student_wh[0]), float(student_wh[1])
        t_refined[:, 0::2] = t_refined[:, 0::2].clip(0.0, sw)
        t_refined[:, 1::2] = t_refined[:, 1::2].clip(0.0, sh)
    s_pred = student.roi_predict(student_feats,
                                 torch.tensor(s_np, dtype=student.dtype))
    w = foreground_weights(t_logits)
    l_sim = entropy_similarity_loss(s_pred.logits, t_logits, measure)
    l_overlap = iou_consistency_loss(s_pred.boxes,
                                     torch.tensor(t_refined, dtype=student.dtype),
                                     w, kind=overlap)
    return l_sim, l_overlap


@dataclass(frozen=True)
class LossWeights:
    """Scalar weights for the composite objective: supervised + alpha *
    pseudo-box terms + beta * proposal-consistency terms."""

    alpha: float
    beta: float


def loss_weights(num_unlabeled: int, num_labeled: int, beta_multiplier: float,
                 entreg_enabled: bool) -> LossWeights:
    """alpha is the unlabeled:labeled batch ratio; beta scales off alpha and
    collapses to zero when the proposal-consistency terms are disabled."""
    if num_unlabeled == 0:
        return LossWeights(alpha=0.0, beta=0.0)
    if num_labeled == 0:
        raise EntRegError("cannot weight unlabeled terms with an empty labeled batch")
    alpha = num_unlabeled / num_labeled
    beta = beta_multiplier * alpha if entreg_enabled else 0.0
    return LossWeights(alpha=alpha, beta=beta)
