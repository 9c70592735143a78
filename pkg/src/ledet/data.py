"""Dataset ingestion, deterministic split construction, serialization.

Annotations are COCO-style JSON (images/annotations/categories, boxes as
x,y,w,h). Few-shot splits are instance-level: an image may contribute shots to
several classes. All sampling is driven by purpose-named seed streams, so a
split regenerated with the same arguments serializes to identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import Box
from .seeds import stream


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    id: int
    path: str
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    box: Box
    class_id: int


class DatasetIndex:
    """Immutable view of one annotation file: images, boxes, categories."""

    def __init__(self, images: list[ImageRecord], annotations: list[Annotation],
                 categories: dict[int, str], root: str | Path = ""):
        self.images = {im.id: im for im in images}
        if len(self.images) != len(images):
            raise DataError("duplicate image ids")
        self.categories = dict(sorted(categories.items()))
        for ann in annotations:
            if ann.image_id not in self.images:
                raise DataError(f"annotation {ann.id} references missing image {ann.image_id}")
            if ann.class_id not in self.categories:
                raise DataError(f"annotation {ann.id} references missing category {ann.class_id}")
        self.annotations = list(annotations)
        self.root = Path(root)
        self._by_image: dict[int, list[Annotation]] = {im_id: [] for im_id in self.images}
        for ann in self.annotations:
            self._by_image[ann.image_id].append(ann)

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.images)

    def annotations_for(self, image_id: int) -> list[Annotation]:
        return list(self._by_image[image_id])

    def image_path(self, image_id: int) -> Path:
        return self.root / self.images[image_id].path

    def class_instance_counts(self) -> dict[int, int]:
        counts = {cid: 0 for cid in self.categories}
        for ann in self.annotations:
            counts[ann.class_id] += 1
        return counts


def load_coco_json(path) -> DatasetIndex:
    """Parse a COCO-style annotation file into a validated DatasetIndex.

    Boxes convert from (x, y, w, h) to corner format and are clipped to image
    bounds. Records that violate the schema name the offending id.
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    for section in ("images", "annotations", "categories"):
        if section not in doc or not isinstance(doc[section], list):
            raise DataError(f"{path}: missing '{section}' array")

    images = []
    for rec in doc["images"]:
        try:
            images.append(ImageRecord(int(rec["id"]), str(rec["file_name"]),
                                      int(rec["width"]), int(rec["height"])))
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad image record {rec.get('id', '?')}: {e}") from None
    categories = {}
    for rec in doc["categories"]:
        try:
            categories[int(rec["id"])] = str(rec["name"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad category record {rec.get('id', '?')}: {e}") from None

    by_id = {im.id: im for im in images}
    annotations = []
    for rec in doc["annotations"]:
        aid = rec.get("id", "?")
        if rec.get("iscrowd"):
            raise DataError(f"{path}: annotation {aid} has iscrowd set; crowd regions are unsupported")
        try:
            image_id = int(rec["image_id"])
            class_id = int(rec["category_id"])
            x, y, w, h = (float(v) for v in rec["bbox"])
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: bad annotation record {aid}: {e}") from None
        if w < 0 or h < 0:
            raise DataError(f"{path}: annotation {aid} has negative box size")
        if image_id not in by_id:
            raise DataError(f"{path}: annotation {aid} references missing image {image_id}")
        im = by_id[image_id]
        box = Box(x, y, x + w, y + h).clip(im.width, im.height)
        annotations.append(Annotation(int(aid) if aid != "?" else len(annotations),
                                      image_id, box, class_id))
    return DatasetIndex(images, annotations, categories, root=path.parent)


@dataclass(frozen=True)
class FewShotSplit:
    """Base/novel class partition plus the sampled k-shot instance lists."""

    base_class_ids: tuple[int, ...]
    novel_class_ids: tuple[int, ...]
    k: int
    seed: int
    # class_id -> tuple of (image_id, annotation_id), sorted
    shot_instances: dict[int, tuple[tuple[int, int], ...]] = field(default_factory=dict)

    def __post_init__(self):
        overlap = set(self.base_class_ids) & set(self.novel_class_ids)
        if overlap:
            raise DataError(f"base and novel classes overlap: {sorted(overlap)}")

    def to_json(self) -> str:
        doc = {
            "base_class_ids": sorted(self.base_class_ids),
            "novel_class_ids": sorted(self.novel_class_ids),
            "k": self.k,
            "seed": self.seed,
            "shot_instances": {str(cid): [list(p) for p in self.shot_instances[cid]]
                               for cid in sorted(self.shot_instances)},
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"

    @staticmethod
    def from_json(text: str) -> "FewShotSplit":
        doc = json.loads(text)
        return FewShotSplit(
            base_class_ids=tuple(sorted(doc["base_class_ids"])),
            novel_class_ids=tuple(sorted(doc["novel_class_ids"])),
            k=int(doc["k"]),
            seed=int(doc["seed"]),
            shot_instances={int(cid): tuple(tuple(p) for p in pairs)
                            for cid, pairs in doc["shot_instances"].items()},
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "FewShotSplit":
        return FewShotSplit.from_json(Path(path).read_text())


def build_few_shot_split(index: DatasetIndex, base: set[int], novel: set[int],
                         k: int, seed: int) -> FewShotSplit:
    """Sample k annotation instances per class, deterministically in seed."""
    base, novel = set(base), set(novel)
    if base & novel:
        raise DataError(f"base and novel classes overlap: {sorted(base & novel)}")
    unknown = (base | novel) - set(index.categories)
    if unknown:
        raise DataError(f"classes not in the dataset: {sorted(unknown)}")

    candidates: dict[int, list[tuple[int, int]]] = {cid: [] for cid in base | novel}
    for ann in index.annotations:
        if ann.class_id in candidates:
            candidates[ann.class_id].append((ann.image_id, ann.id))

    shots: dict[int, tuple[tuple[int, int], ...]] = {}
    starved = []
    for cid in sorted(base | novel):
        pool = sorted(candidates[cid])
        if len(pool) < k:
            starved.append(cid)
            continue
        rng = stream(seed, "few_shot", cid)
        picked = rng.choice(len(pool), size=k, replace=False)
        shots[cid] = tuple(sorted(pool[i] for i in picked))
    if starved:
        raise DataError(f"classes with fewer than k={k} instances: {starved}")
    return FewShotSplit(tuple(sorted(base)), tuple(sorted(novel)), k, seed, shots)


def sample_labeled_fraction(index: DatasetIndex, percent: float, seed: int) -> tuple[list[int], list[int]]:
    """Image-level partition with |labeled| = round(percent/100 * |images|)."""
    if not 0 < percent <= 100:
        raise DataError(f"percent must be in (0, 100], got {percent}")
    ids = index.image_ids
    if not ids:
        raise DataError("empty dataset")
    n_labeled = int(percent / 100.0 * len(ids) + 0.5)
    rng = stream(seed, "labeled_fraction")
    perm = rng.permutation(len(ids))
    labeled = sorted(ids[i] for i in perm[:n_labeled])
    unlabeled = sorted(ids[i] for i in perm[n_labeled:])
    return labeled, unlabeled


@dataclass(frozen=True)
class ClassMapping:
    """Dataset category ids <-> contiguous model class indices.

    Model foreground index i stands for dataset id ``dataset_ids[i]``; the
    detector's background logit sits after the last foreground index. Base
    classes come first so a head trained on base classes keeps its indices
    when novel classes are appended.
    """

    dataset_ids: tuple[int, ...]

    def __post_init__(self):
        if not self.dataset_ids:
            raise DataError("mapping needs at least one class")
        if len(set(self.dataset_ids)) != len(self.dataset_ids):
            raise DataError(f"duplicate class ids in mapping: {self.dataset_ids}")

    @property
    def num_foreground(self) -> int:
        return len(self.dataset_ids)

    def contiguous(self, dataset_id: int) -> int:
        try:
            return self.dataset_ids.index(dataset_id)
        except ValueError:
            raise DataError(f"class id {dataset_id} not in mapping {self.dataset_ids}") from None

    def dataset(self, index: int) -> int:
        if not 0 <= index < len(self.dataset_ids):
            raise DataError(f"foreground index {index} out of range for {len(self.dataset_ids)} classes")
        return self.dataset_ids[index]


def class_mapping(base_ids, novel_ids=()) -> ClassMapping:
    """Contiguous mapping: sorted base ids first, then sorted novel ids."""
    base, novel = sorted(base_ids), sorted(novel_ids)
    return ClassMapping(tuple(base) + tuple(novel))
