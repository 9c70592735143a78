"""Boxes, overlap measures, affine transforms, and non-maximum suppression.

Boxes are axis-aligned rectangles in corner format (x1, y1, x2, y2) with
continuous "edge" coordinates: width = x2 - x1, no +1. All functions here are
pure and safe for concurrent use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle; invariant x2 >= x1, y2 >= y1."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"degenerate box corners: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clip(self, width: float, height: float) -> "Box":
        """Clip to the image rectangle [0, width] x [0, height]."""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        return Box(x1, y1, max(x1, x2), max(y1, y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score and a category index."""

    box: Box
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score outside [0, 1]: {self.score}")


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 for a zero-area union."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: iou minus the fraction of the enclosing hull not covered
    by the union. Ranges over [-1, 1]; 0 for a zero-area enclosing box."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    enclose = (max(a.x2, b.x2) - min(a.x1, b.x1)) * (max(a.y2, b.y2) - min(a.y1, b.y1))
    if enclose <= 0.0:
        return 0.0
    base = inter / union if union > 0.0 else 0.0
    return base - (enclose - union) / enclose


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner-format arrays -> (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


def aligned_overlap(a: torch.Tensor, b: torch.Tensor, kind: str = "iou") -> torch.Tensor:
    """Elementwise overlap between two (N, 4) tensors -> (N,).

    Differentiable in both arguments; kind is "iou" or "giou". Zero-area
    unions (or enclosing hulls for giou) yield 0, matching the scalar ops.
    """
    ix = torch.minimum(a[:, 2], b[:, 2]) - torch.maximum(a[:, 0], b[:, 0])
    iy = torch.minimum(a[:, 3], b[:, 3]) - torch.maximum(a[:, 1], b[:, 1])
    inter = ix.clamp(min=0) * iy.clamp(min=0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    safe_union = torch.where(union > 0, union, torch.ones_like(union))
    overlap = torch.where(union > 0, inter / safe_union, torch.zeros_like(union))
    if kind == "iou":
        return overlap
    if kind == "giou":
        ex = torch.maximum(a[:, 2], b[:, 2]) - torch.minimum(a[:, 0], b[:, 0])
        ey = torch.maximum(a[:, 3], b[:, 3]) - torch.minimum(a[:, 1], b[:, 1])
        enclose = ex * ey
        safe_enc = torch.where(enclose > 0, enclose, torch.ones_like(enclose))
        slack = torch.where(enclose > 0, (enclose - union) / safe_enc, torch.zeros_like(enclose))
        return torch.where(enclose > 0, overlap - slack, torch.zeros_like(overlap))
    raise ValueError(f"unknown overlap kind: {kind!r}")


class AffineTransform:
    """Invertible 2D affine map stored as a 3x3 homogeneous matrix (row-major,
    last row fixed to (0, 0, 1)). Points are mapped as column vectors."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
        if not np.allclose(m[2], (0.0, 0.0, 1.0), atol=1e-12):
            raise ValueError("last row of an affine matrix must be (0, 0, 1)")
        if abs(m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]) < 1e-12:
            raise ValueError("affine matrix is not invertible")
        self.matrix = m
        self.matrix.setflags(write=False)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        return cls([[1, 0, tx], [0, 1, ty], [0, 0, 1]])

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> "AffineTransform":
        sy = sx if sy is None else sy
        return cls([[sx, 0, 0], [0, sy, 0], [0, 0, 1]])

    @classmethod
    def rotation(cls, degrees: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        cx, cy = center
        t = np.deg2rad(degrees)
        c, s = np.cos(t), np.sin(t)
        rot = cls([[c, -s, 0], [s, c, 0], [0, 0, 1]])
        return compose(cls.translation(cx, cy), rot, cls.translation(-cx, -cy))

    @classmethod
    def shear(cls, x_degrees: float, y_degrees: float, center: tuple[float, float] = (0.0, 0.0)) -> "AffineTransform":
        cx, cy = center
        sh = cls([[1, np.tan(np.deg2rad(x_degrees)), 0],
                  [np.tan(np.deg2rad(y_degrees)), 1, 0],
                  [0, 0, 1]])
        return compose(cls.translation(cx, cy), sh, cls.translation(-cx, -cy))

    @classmethod
    def horizontal_flip(cls, width: float) -> "AffineTransform":
        return cls([[-1, 0, width], [0, 1, 0], [0, 0, 1]])

    def invert(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def apply_to_points(self, points: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        homo = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
        return (self.matrix @ homo.T).T[:, :2]

    def is_identity(self, atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix, np.eye(3), atol=atol))


def compose(*transforms: AffineTransform) -> AffineTransform:
    """compose(a, b) maps x -> a(b(x)): the rightmost transform applies first."""
    m = np.eye(3)
    for t in transforms:
        m = m @ t.matrix
    return AffineTransform(m)


def apply_affine(m: AffineTransform, b: Box) -> Box:
    """Axis-aligned bounding box of the four transformed corners."""
    corners = np.array([[b.x1, b.y1], [b.x2, b.y1], [b.x2, b.y2], [b.x1, b.y2]])
    mapped = m.apply_to_points(corners)
    return Box(float(mapped[:, 0].min()), float(mapped[:, 1].min()),
               float(mapped[:, 0].max()), float(mapped[:, 1].max()))


def apply_affine_boxes(m: AffineTransform, boxes: np.ndarray) -> np.ndarray:
    """Vectorized apply_affine over an (N, 4) corner array -> (N, 4)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    corners = np.stack([
        np.stack([x1, y1], axis=1),
        np.stack([x2, y1], axis=1),
        np.stack([x2, y2], axis=1),
        np.stack([x1, y2], axis=1),
    ], axis=1)  # (N, 4, 2)
    mapped = m.apply_to_points(corners.reshape(-1, 2)).reshape(-1, 4, 2)
    out = np.empty_like(boxes)
    out[:, 0] = mapped[:, :, 0].min(axis=1)
    out[:, 1] = mapped[:, :, 1].min(axis=1)
    out[:, 2] = mapped[:, :, 0].max(axis=1)
    out[:, 3] = mapped[:, :, 1].max(axis=1)
    return out


def nms(boxes: list[ScoredBox], iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression; returns kept indices in descending score
    order. Ties on equal scores are broken by lower original index."""
    if not boxes:
        return []
    arr = np.stack([sb.box.as_array() for sb in boxes])
    scores = np.array([sb.score for sb in boxes], dtype=np.float64)
    return nms_arrays(arr, scores, iou_threshold)


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """nms over an (N, 4) corner array plus (N,) scores -> kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = len(scores)
    if n == 0:
        return []
    # lexsort is ascending; sort by (-score, index) for deterministic ties
    order = np.lexsort((np.arange(n), -scores))
    overlaps = iou_matrix(boxes, boxes)
    kept: list[int] = []
    for idx in order:
        if all(overlaps[idx, k] < iou_threshold for k in kept):
            kept.append(int(idx))
    return kept
