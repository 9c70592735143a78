"""Three-branch augmentation: labeled-student, strong unlabeled-student, and
weak unlabeled-teacher views.

Every view carries the composite AffineTransform mapping ORIGINAL image
coordinates to view coordinates. Geometric ops (resize, flip, affine warps)
contribute to the transform; photometric ops and cutout do not. Box
coordinates use the continuous edge convention, so the transform passed to
cv2.warpAffine (whose lattice addresses pixel centers) is conjugated by a
half-pixel shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
from PIL import Image, ImageEnhance, ImageOps

from .geometry import AffineTransform, compose

COLOR_OPS = ("identity", "autocontrast", "equalize", "solarize", "color",
             "contrast", "brightness", "sharpness", "posterize")

BRANCHES = ("labeled", "strong", "weak")


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentationRecipe:
    branch: str
    resize_short_edge: tuple[int, int]
    flip_prob: float = 0.5
    geometric_op_prob: float = 1.0 / 3.0
    translation_range: tuple[float, float] = (-0.1, 0.1)
    shear_range_deg: tuple[float, float] = (-30.0, 30.0)
    rotation_range_deg: tuple[float, float] = (-30.0, 30.0)
    cutout_count: tuple[int, int] = (1, 5)
    cutout_size: tuple[float, float] = (0.0, 0.2)
    solarize_threshold: tuple[int, int] = (0, 256)
    posterize_bits: tuple[int, int] = (4, 8)
    enhance_factor: tuple[float, float] = (0.1, 1.9)
    fill_color: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.branch not in BRANCHES:
            raise AugmentError(f"unknown branch {self.branch!r}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise AugmentError("flip_prob outside [0, 1]")
        for name in ("resize_short_edge", "translation_range", "shear_range_deg",
                     "rotation_range_deg", "cutout_count", "cutout_size",
                     "solarize_threshold", "posterize_bits", "enhance_factor"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise AugmentError(f"{name} range must satisfy lo <= hi")

    @property
    def uses_color_ops(self) -> bool:
        return self.branch in ("labeled", "strong")

    @property
    def uses_geometric_ops(self) -> bool:
        return self.branch == "strong"


def recipe_from_config(branch: str, aug_cfg: dict,
                       fill_color: tuple[float, float, float] | None = None) -> AugmentationRecipe:
    """Build a branch recipe from the augment section of an experiment config."""
    return AugmentationRecipe(
        branch=branch,
        resize_short_edge=tuple(aug_cfg["resize_short_edge"]),
        flip_prob=float(aug_cfg["flip_prob"]),
        geometric_op_prob=float(aug_cfg["geometric_op_prob"]),
        translation_range=tuple(aug_cfg["translation_range"]),
        shear_range_deg=tuple(aug_cfg["shear_range_deg"]),
        rotation_range_deg=tuple(aug_cfg["rotation_range_deg"]),
        cutout_count=tuple(aug_cfg["cutout_count"]),
        cutout_size=tuple(aug_cfg["cutout_size"]),
        solarize_threshold=tuple(aug_cfg["solarize_threshold"]),
        posterize_bits=tuple(aug_cfg["posterize_bits"]),
        enhance_factor=tuple(aug_cfg["enhance_factor"]),
        fill_color=fill_color,
    )


@dataclass(frozen=True)
class AugmentedView:
    image: np.ndarray  # uint8 HxWx3
    transform: AffineTransform  # original -> view, edge coordinates
    applied_ops: tuple[tuple[str, dict], ...]

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])


def augment(image: np.ndarray, recipe: AugmentationRecipe, rng: np.random.Generator) -> AugmentedView:
    """Sample and apply one view of `image` under the branch recipe."""
    if image.size == 0:
        raise AugmentError("empty image")
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    ops: list[tuple[str, dict]] = []

    # 1. resize: short edge drawn uniformly from the branch range
    h0, w0 = img.shape[:2]
    lo, hi = recipe.resize_short_edge
    short = int(rng.integers(int(lo), int(hi) + 1))
    scale = short / min(h0, w0)
    w1, h1 = max(1, round(w0 * scale)), max(1, round(h0 * scale))
    img = cv2.resize(img, (w1, h1), interpolation=cv2.INTER_LINEAR)
    transform = AffineTransform.scaling(w1 / w0, h1 / h0)
    ops.append(("resize", {"short_edge": short, "sx": w1 / w0, "sy": h1 / h0}))

    # 2. horizontal flip
    if rng.uniform() < recipe.flip_prob:
        img = np.ascontiguousarray(img[:, ::-1])
        transform = compose(AffineTransform.horizontal_flip(w1), transform)
        ops.append(("hflip", {}))

    # 3. one of the nine color ops, uniformly (photometric; transform untouched)
    if recipe.uses_color_ops:
        name = COLOR_OPS[int(rng.integers(0, len(COLOR_OPS)))]
        img, params = _apply_color_op(img, name, recipe, rng)
        ops.append((name, params))

    fill = recipe.fill_color if recipe.fill_color is not None else tuple(img.mean(axis=(0, 1)))

    # 4. strong-branch affine warps, each applied independently with p=1/3
    if recipe.uses_geometric_ops:
        affine, affine_ops = _sample_affine(recipe, rng, w1, h1)
        if not affine.is_identity():
            img = _warp(img, affine, fill)
            transform = compose(affine, transform)
        ops.extend(affine_ops)

    # 5. cutout (strong branch; erases pixels, never the transform)
    if recipe.branch == "strong":
        img, cut_ops = _apply_cutout(img, recipe, rng, fill)
        ops.extend(cut_ops)

    return AugmentedView(image=img, transform=transform, applied_ops=tuple(ops))


def deterministic_resize_view(image: np.ndarray, short_edge: int) -> AugmentedView:
    """Test-time view: fixed short-edge resize, no flip, no photometric ops."""
    img = np.asarray(image)
    h0, w0 = img.shape[:2]
    scale = short_edge / min(h0, w0)
    w1, h1 = max(1, round(w0 * scale)), max(1, round(h0 * scale))
    out = cv2.resize(img, (w1, h1), interpolation=cv2.INTER_LINEAR)
    t = AffineTransform.scaling(w1 / w0, h1 / h0)
    return AugmentedView(out, t, (("resize", {"short_edge": short_edge, "sx": w1 / w0, "sy": h1 / h0}),))


def relate_views(view_s: AugmentedView, view_t: AugmentedView) -> AffineTransform:
    """Transform mapping teacher-view coordinates into student-view coordinates."""
    return compose(view_s.transform, view_t.transform.invert())


def _apply_color_op(img: np.ndarray, name: str, recipe: AugmentationRecipe,
                    rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    if name == "identity":
        return img, {}
    pil = Image.fromarray(img)
    if name == "autocontrast":
        return np.asarray(ImageOps.autocontrast(pil)), {}
    if name == "equalize":
        return np.asarray(ImageOps.equalize(pil)), {}
    if name == "solarize":
        thr = int(rng.integers(recipe.solarize_threshold[0], recipe.solarize_threshold[1]))
        return np.asarray(ImageOps.solarize(pil, threshold=thr)), {"threshold": thr}
    if name == "posterize":
        bits = int(rng.integers(recipe.posterize_bits[0], recipe.posterize_bits[1] + 1))
        return np.asarray(ImageOps.posterize(pil, bits)), {"bits": bits}
    factor = float(rng.uniform(*recipe.enhance_factor))
    enhancer = {"color": ImageEnhance.Color, "contrast": ImageEnhance.Contrast,
                "brightness": ImageEnhance.Brightness, "sharpness": ImageEnhance.Sharpness}[name]
    return np.asarray(enhancer(pil).enhance(factor)), {"factor": factor}


def _sample_affine(recipe: AugmentationRecipe, rng: np.random.Generator,
                   width: int, height: int) -> tuple[AffineTransform, list[tuple[str, dict]]]:
    center = (width / 2.0, height / 2.0)
    for _retry in range(5):
        try:
            parts: list[AffineTransform] = []
            ops: list[tuple[str, dict]] = []
            if rng.uniform() < recipe.geometric_op_prob:
                tx = float(rng.uniform(*recipe.translation_range)) * width
                ty = float(rng.uniform(*recipe.translation_range)) * height
                parts.append(AffineTransform.translation(tx, ty))
                ops.append(("translation", {"tx": tx, "ty": ty}))
            if rng.uniform() < recipe.geometric_op_prob:
                sx = float(rng.uniform(*recipe.shear_range_deg))
                sy = float(rng.uniform(*recipe.shear_range_deg))
                parts.append(AffineTransform.shear(sx, sy, center=center))
                ops.append(("shear", {"x_deg": sx, "y_deg": sy}))
            if rng.uniform() < recipe.geometric_op_prob:
                angle = float(rng.uniform(*recipe.rotation_range_deg))
                parts.append(AffineTransform.rotation(angle, center=center))
                ops.append(("rotation", {"angle": angle}))
            # later ops apply after earlier ones
            combined = AffineTransform.identity()
            for p in parts:
                combined = compose(p, combined)
            return combined, ops
        except ValueError:
            continue
    raise AugmentError("could not sample an invertible affine transform")


def _warp(img: np.ndarray, transform: AffineTransform, fill) -> np.ndarray:
    h, w = img.shape[:2]
    # conjugate edge-coordinate transform into cv2's pixel-center convention
    half = AffineTransform.translation(0.5, 0.5)
    cv_matrix = compose(half.invert(), transform, half).matrix[:2]
    return cv2.warpAffine(
        img, cv_matrix, (w, h), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=tuple(float(c) for c in fill),
    )


def _apply_cutout(img: np.ndarray, recipe: AugmentationRecipe, rng: np.random.Generator,
                  fill) -> tuple[np.ndarray, list[tuple[str, dict]]]:
    h, w = img.shape[:2]
    short = min(h, w)
    out = img.copy()
    n = int(rng.integers(recipe.cutout_count[0], recipe.cutout_count[1] + 1))
    ops = []
    for _ in range(n):
        cw = float(rng.uniform(*recipe.cutout_size)) * short
        ch = float(rng.uniform(*recipe.cutout_size)) * short
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        x1, x2 = int(max(0, cx - cw / 2)), int(min(w, cx + cw / 2))
        y1, y2 = int(max(0, cy - ch / 2)), int(min(h, cy + ch / 2))
        if x2 > x1 and y2 > y1:
            out[y1:y2, x1:x2] = np.asarray(fill, dtype=np.float64).astype(img.dtype)
        ops.append(("cutout", {"x1": x1, "y1": y1, "x2": x2, "y2": y2}))
    return out, ops
