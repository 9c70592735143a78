"""Synthetic scene generator: colored geometric shapes on a dark canvas.

Eight shape classes stand in for object categories (the first six are the
default base classes, the last two novel). Ground-truth boxes are the tight
extents of the rendered masks, so localization labels are exact by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .data import DataError
from .geometry import Box
from .seeds import stream

SHAPE_NAMES = ("square", "circle", "triangle", "plus", "ring", "diamond", "checker", "cross")

# class_id (1-based) -> base RGB; hues spread out so photometric jitter keeps
# classes separable
BASE_COLORS = {
    1: (220, 60, 60),
    2: (60, 200, 70),
    3: (70, 90, 230),
    4: (230, 220, 60),
    5: (220, 70, 210),
    6: (60, 210, 220),
    7: (240, 150, 50),
    8: (150, 70, 230),
}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    canvas_size: int = 64
    class_ids: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    objects_min: int = 1
    objects_max: int = 4
    size_range: tuple[float, float] = (12.0, 24.0)
    color_jitter: float = 20.0

    def __post_init__(self):
        if self.objects_min < 0 or self.objects_max < self.objects_min:
            raise DataError("objects range must satisfy 0 <= min <= max")
        if self.size_range[0] > self.size_range[1]:
            raise DataError("size range must satisfy lo <= hi")
        if any(cid not in BASE_COLORS for cid in self.class_ids):
            raise DataError(f"class ids must be within 1..{len(SHAPE_NAMES)}")
        if self.canvas_size < self.size_range[0] + 4:
            raise DataError(f"canvas {self.canvas_size} too small for minimum object "
                            f"size {self.size_range[0]}")


def _shape_mask(shape: str, size: float, canvas: int, cx: float, cy: float) -> np.ndarray:
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    # pixel centers
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    h = size / 2.0
    if shape == "square":
        return (np.abs(dx) <= h) & (np.abs(dy) <= h)
    if shape == "circle":
        return dx**2 + dy**2 <= h**2
    if shape == "triangle":
        # apex at top, base at bottom; half-width grows linearly with depth
        depth = (dy + h) / size
        inside = (depth >= 0) & (depth <= 1)
        return inside & (np.abs(dx) <= depth * h)
    if shape == "plus":
        t = max(size / 6.0, 1.5)
        return ((np.abs(dx) <= t) & (np.abs(dy) <= h)) | ((np.abs(dy) <= t) & (np.abs(dx) <= h))
    if shape == "ring":
        r2 = dx**2 + dy**2
        return (r2 <= h**2) & (r2 >= (0.55 * h) ** 2)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= h
    if shape == "checker":
        cell = max(size / 4.0, 2.0)
        inside = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        parity = (np.floor((dx + h) / cell) + np.floor((dy + h) / cell)).astype(int) % 2 == 0
        return inside & parity
    if shape == "cross":
        t = max(size / 6.0, 1.5)
        inside = (np.abs(dx) <= h) & (np.abs(dy) <= h)
        return inside & ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t))
    raise DataError(f"unknown shape {shape!r}")


def generate_synthetic_scene(spec: SyntheticSceneSpec, rng: np.random.Generator,
                             return_masks: bool = False):
    """Render one scene -> (image uint8 HxWx3, list of (Box, class_id)[, masks]).

    Objects are placed without overlap by rejection sampling; an object that
    cannot be placed after bounded retries is skipped rather than overlapped.
    """
    canvas = spec.canvas_size
    bg = float(rng.uniform(25, 55))
    image = np.full((canvas, canvas, 3), bg, dtype=np.float64)
    image += rng.normal(0.0, 2.0, size=image.shape)

    if spec.objects_max == 0:
        n_objects = 0
    else:
        n_objects = int(rng.integers(spec.objects_min, spec.objects_max + 1))

    annotations: list[tuple[Box, int]] = []
    masks: list[np.ndarray] = []
    placed_boxes: list[np.ndarray] = []
    for _ in range(n_objects):
        cid = int(rng.choice(spec.class_ids))
        size = float(rng.uniform(*spec.size_range))
        placed = False
        for _attempt in range(40):
            margin = size / 2.0 + 1.5
            cx = float(rng.uniform(margin, canvas - margin))
            cy = float(rng.uniform(margin, canvas - margin))
            cand = np.array([cx - margin, cy - margin, cx + margin, cy + margin])
            if all(_boxes_disjoint(cand, prev) for prev in placed_boxes):
                placed = True
                break
        if not placed:
            continue
        mask = _shape_mask(SHAPE_NAMES[cid - 1], size, canvas, cx, cy)
        if not mask.any():
            continue
        color = np.array(BASE_COLORS[cid], dtype=np.float64)
        color = color + rng.uniform(-spec.color_jitter, spec.color_jitter, size=3)
        image[mask] = color + rng.normal(0.0, 2.0, size=(int(mask.sum()), 3))
        rows = np.any(mask, axis=1).nonzero()[0]
        cols = np.any(mask, axis=0).nonzero()[0]
        box = Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
        annotations.append((box, cid))
        masks.append(mask)
        placed_boxes.append(cand)

    out = np.clip(image, 0, 255).astype(np.uint8)
    if return_masks:
        return out, annotations, masks
    return out, annotations


def _boxes_disjoint(a: np.ndarray, b: np.ndarray) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def generate_synthetic_dataset(spec: SyntheticSceneSpec, n_images: int, out_dir,
                               seed: int, subset: str = "train") -> Path:
    """Write n_images rendered scenes plus one COCO-style JSON; returns its path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / f"images_{subset}"
    img_dir.mkdir(parents=True, exist_ok=True)

    images, annotations = [], []
    ann_id = 1
    for i in range(n_images):
        rng = stream(seed, "synth", subset, i)
        pixels, anns = generate_synthetic_scene(spec, rng)
        name = f"{subset}_{i:05d}.png"
        Image.fromarray(pixels).save(img_dir / name)
        image_id = i + 1
        images.append({"id": image_id, "file_name": f"images_{subset}/{name}",
                       "width": spec.canvas_size, "height": spec.canvas_size})
        for box, cid in anns:
            annotations.append({
                "id": ann_id, "image_id": image_id, "category_id": cid,
                "bbox": [box.x1, box.y1, box.width, box.height],
                "area": box.area,
            })
            ann_id += 1

    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [{"id": cid, "name": SHAPE_NAMES[cid - 1]} for cid in sorted(set(spec.class_ids))],
    }
    ann_path = out_dir / f"{subset}.json"
    with open(ann_path, "w") as f:
        json.dump(doc, f, indent=2)
    return ann_path
