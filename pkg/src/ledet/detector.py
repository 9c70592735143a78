"""Minimal two-stage detector: strided-conv backbone, two-level feature
pyramid, RPN, and an RoI head with separate classifier/regressor towers.

Parameter names partition into exactly five groups (backbone, neck, rpn,
roi_classifier, roi_regressor); freeze policies and checkpoint transfer act on
those prefixes. The background class always occupies the LAST logit index.
Normalization is GroupNorm throughout, so the teacher/student pair carries no
running statistics and inference is batch-independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import roi_align

from .geometry import Box, ScoredBox, iou_matrix, nms_arrays
from .seeds import stream

PARAM_GROUPS = ("backbone", "neck", "rpn", "roi_classifier", "roi_regressor")

# feature strides of the two pyramid levels; RoI pooling reads the finer one
STRIDES = (4, 8)


class DetectorError(ValueError):
    pass


def group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    if head not in PARAM_GROUPS:
        raise DetectorError(f"parameter {param_name!r} outside the five groups")
    return head


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    groups = max(1, cout // 8)
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(groups, cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Strided conv stack emitting stride-4 and stride-8 feature maps."""

    def __init__(self, base_channels: int):
        super().__init__()
        c = base_channels
        self.stem = _conv_block(3, c, 2)
        self.stage2 = nn.Sequential(_conv_block(c, 2 * c, 2), _conv_block(2 * c, 2 * c, 1))
        self.stage3 = nn.Sequential(_conv_block(2 * c, 4 * c, 2), _conv_block(4 * c, 4 * c, 1))

    def forward(self, x):
        x = self.stem(x)
        c2 = self.stage2(x)
        c3 = self.stage3(c2)
        return c2, c3


class Neck(nn.Module):
    """Two-level top-down feature pyramid."""

    def __init__(self, base_channels: int, fpn_channels: int):
        super().__init__()
        c = base_channels
        self.lateral2 = nn.Conv2d(2 * c, fpn_channels, 1)
        self.lateral3 = nn.Conv2d(4 * c, fpn_channels, 1)
        self.out2 = nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1)
        self.out3 = nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1)

    def forward(self, c2, c3):
        p3 = self.lateral3(c3)
        up = F.interpolate(p3, size=c2.shape[-2:], mode="nearest")
        p2 = self.lateral2(c2) + up
        return self.out2(p2), self.out3(p3)


class RpnHead(nn.Module):
    def __init__(self, fpn_channels: int, num_anchors: int):
        super().__init__()
        self.shared = nn.Sequential(
            nn.Conv2d(fpn_channels, fpn_channels, 3, padding=1), nn.ReLU(inplace=True))
        self.objectness = nn.Conv2d(fpn_channels, num_anchors, 1)
        self.deltas = nn.Conv2d(fpn_channels, num_anchors * 4, 1)

    def forward(self, feat):
        h = self.shared(feat)
        return self.objectness(h), self.deltas(h)


class RoITower(nn.Module):
    """Flatten pooled RoI features through a 2-layer MLP to an output head."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, out_dim)

    def forward(self, pooled):
        x = pooled.flatten(1)
        x = F.relu(self.fc1(x))
        x = F.relu(self.fc2(x))
        return self.head(x)


@dataclass
class RoIPrediction:
    """Per-proposal classification logits and class-agnostic box regression."""

    logits: torch.Tensor     # (N, C_total), background last
    deltas: torch.Tensor     # (N, 4)
    boxes: torch.Tensor      # (N, 4) decoded corner boxes, differentiable
    proposals: torch.Tensor  # (N, 4) the input proposals (constants)

    def __len__(self) -> int:
        return int(self.logits.shape[0])


def encode_deltas(proposals: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Standard (tx, ty, tw, th) parametrization of targets w.r.t. proposals."""
    pw = (proposals[:, 2] - proposals[:, 0]).clamp(min=1e-4)
    ph = (proposals[:, 3] - proposals[:, 1]).clamp(min=1e-4)
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    tw_ = (targets[:, 2] - targets[:, 0]).clamp(min=1e-4)
    th_ = (targets[:, 3] - targets[:, 1]).clamp(min=1e-4)
    tx_ = targets[:, 0] + 0.5 * tw_
    ty_ = targets[:, 1] + 0.5 * th_
    return torch.stack([(tx_ - px) / pw, (ty_ - py) / ph,
                        torch.log(tw_ / pw), torch.log(th_ / ph)], dim=1)


def decode_deltas(proposals: torch.Tensor, deltas: torch.Tensor,
                  max_log_scale: float = 4.0) -> torch.Tensor:
    """Inverse of encode_deltas; log scales clamped for numeric safety."""
    pw = (proposals[:, 2] - proposals[:, 0]).clamp(min=1e-4)
    ph = (proposals[:, 3] - proposals[:, 1]).clamp(min=1e-4)
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    cx = px + deltas[:, 0] * pw
    cy = py + deltas[:, 1] * ph
    w = pw * torch.exp(deltas[:, 2].clamp(max=max_log_scale))
    h = ph * torch.exp(deltas[:, 3].clamp(max=max_log_scale))
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def generate_anchors(height: int, width: int, stride: int, ratios,
                     dtype=torch.float32) -> torch.Tensor:
    """Anchor grid for one level: base size 4*stride, one anchor per ratio."""
    base = 4.0 * stride
    ws = torch.tensor([base / (r ** 0.5) for r in ratios], dtype=dtype)
    hs = torch.tensor([base * (r ** 0.5) for r in ratios], dtype=dtype)
    xs = (torch.arange(width, dtype=dtype) + 0.5) * stride
    ys = (torch.arange(height, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    # (H*W, A, 4) -> (H*W*A, 4), anchor index fastest
    out = torch.stack([cx - ws / 2, cy - hs / 2, cx + ws / 2, cy + hs / 2], dim=2)
    return out.reshape(-1, 4)


class TwoStageDetector(nn.Module):
    def __init__(self, num_foreground_classes: int, base_channels: int = 16,
                 fpn_channels: int = 32, roi_pool_size: int = 4, roi_hidden: int = 128,
                 anchor_ratios=(0.5, 1.0, 2.0), rpn_pre_nms: int = 512,
                 rpn_post_nms: int = 128, rpn_nms_thresh: float = 0.7,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        if num_foreground_classes < 1:
            raise DetectorError("need at least one foreground class")
        self.num_foreground_classes = num_foreground_classes
        self.num_classes_total = num_foreground_classes + 1  # background LAST
        self.anchor_ratios = tuple(float(r) for r in anchor_ratios)
        self.roi_pool_size = roi_pool_size
        self.rpn_pre_nms = rpn_pre_nms
        self.rpn_post_nms = rpn_post_nms
        self.rpn_nms_thresh = rpn_nms_thresh

        self.backbone = Backbone(base_channels)
        self.neck = Neck(base_channels, fpn_channels)
        self.rpn = RpnHead(fpn_channels, len(self.anchor_ratios))
        pooled_dim = fpn_channels * roi_pool_size * roi_pool_size
        self.roi_classifier = RoITower(pooled_dim, roi_hidden, self.num_classes_total)
        self.roi_regressor = RoITower(pooled_dim, roi_hidden, 4)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.roi_classifier.head.weight.dtype

    # ---- tensor plumbing -------------------------------------------------

    def image_to_tensor(self, image: np.ndarray) -> torch.Tensor:
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = np.stack([arr] * 3, axis=-1)
        if not arr.flags.writeable:
            arr = arr.copy()  # torch cannot wrap read-only buffers
        t = torch.from_numpy(np.ascontiguousarray(arr)).to(self.dtype)
        return ((t / 255.0) - 0.5).permute(2, 0, 1).unsqueeze(0) / 0.25

    def features(self, image_t: torch.Tensor):
        c2, c3 = self.backbone(image_t)
        return self.neck(c2, c3)

    def level_anchors(self, feats) -> list[torch.Tensor]:
        return [generate_anchors(f.shape[-2], f.shape[-1], s, self.anchor_ratios, self.dtype)
                for f, s in zip(feats, STRIDES)]

    def rpn_raw(self, feats):
        """Flattened per-anchor objectness logits and deltas across levels."""
        logits, deltas = [], []
        for f in feats:
            obj, d = self.rpn(f)
            a = obj.shape[1]
            logits.append(obj.permute(0, 2, 3, 1).reshape(-1))
            deltas.append(d.permute(0, 2, 3, 1).reshape(-1, a, 4).reshape(-1, 4))
        return torch.cat(logits), torch.cat(deltas)

    def proposals_from_features(self, feats, image_hw: tuple[int, int],
                                pre_nms: int | None = None,
                                post_nms: int | None = None):
        """Decoded, clipped, NMS-filtered proposals -> (boxes (N,4), scores (N,)).

        Proposal boxes are treated as constants downstream (no gradient).
        The pre/post NMS budgets default to the construction-time values.
        """
        pre_nms = self.rpn_pre_nms if pre_nms is None else pre_nms
        post_nms = self.rpn_post_nms if post_nms is None else post_nms
        with torch.no_grad():
            logits, deltas = self.rpn_raw(feats)
            anchors = torch.cat(self.level_anchors(feats))
            scores = torch.sigmoid(logits)
            boxes = decode_deltas(anchors, deltas)
            h, w = image_hw
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, w)
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, h)
            keep = ((boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)).nonzero(as_tuple=True)[0]
            boxes, scores = boxes[keep], scores[keep]
            if len(scores) == 0:
                return boxes, scores
            np_scores = scores.double().numpy()
            order = np.lexsort((np.arange(len(np_scores)), -np_scores))[:pre_nms]
            np_boxes = boxes.double().numpy()[order]
            kept = nms_arrays(np_boxes, np_scores[order], self.rpn_nms_thresh)[:post_nms]
            chosen = torch.from_numpy(order[kept].copy())
            return boxes[chosen], scores[chosen]

    def roi_predict(self, feats, proposals: torch.Tensor) -> RoIPrediction:
        """RoI head over given proposals (order preserved, one output each)."""
        if proposals.numel() == 0:
            empty = torch.zeros((0, self.num_classes_total), dtype=self.dtype)
            z4 = torch.zeros((0, 4), dtype=self.dtype)
            return RoIPrediction(empty, z4, z4, proposals.reshape(0, 4))
        pooled = roi_align(feats[0], [proposals.to(self.dtype)],
                           output_size=self.roi_pool_size,
                           spatial_scale=1.0 / STRIDES[0], sampling_ratio=2, aligned=True)
        logits = self.roi_classifier(pooled)
        deltas = self.roi_regressor(pooled)
        boxes = decode_deltas(proposals.detach(), deltas)
        return RoIPrediction(logits, deltas, boxes, proposals.detach())

    # ---- public inference ------------------------------------------------

    def forward_rpn(self, image: np.ndarray,
                    max_proposals: int | None = None) -> list[tuple[Box, float]]:
        """Proposals for one image, sorted by descending objectness, post-NMS.

        `max_proposals` widens (or narrows) both NMS budgets, for
        proposal-recall evaluation at budgets beyond the training setting.
        """
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                t = self.image_to_tensor(image)
                feats = self.features(t)
                pre = None if max_proposals is None else max(max_proposals, self.rpn_pre_nms)
                boxes, scores = self.proposals_from_features(
                    feats, t.shape[-2:], pre_nms=pre, post_nms=max_proposals)
        finally:
            self.train(was_training)
        return [(Box(*[float(v) for v in b]), float(s)) for b, s in zip(boxes, scores)]

    def forward_roi(self, image: np.ndarray, proposals: list[Box]) -> RoIPrediction:
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                t = self.image_to_tensor(image)
                feats = self.features(t)
                if proposals:
                    p = torch.tensor([[b.x1, b.y1, b.x2, b.y2] for b in proposals], dtype=self.dtype)
                else:
                    p = torch.zeros((0, 4), dtype=self.dtype)
                return self.roi_predict(feats, p)
        finally:
            self.train(was_training)

    def detect(self, image: np.ndarray, score_thresh: float = 0.05,
               nms_thresh: float = 0.5, max_detections: int = 100,
               top_n: int = 512) -> list[ScoredBox]:
        """Full two-stage inference -> scored boxes with contiguous class ids."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                t = self.image_to_tensor(image)
                h, w = t.shape[-2:]
                feats = self.features(t)
                boxes, _ = self.proposals_from_features(feats, (h, w))
                boxes = boxes[:top_n]
                pred = self.roi_predict(feats, boxes)
                if len(pred) == 0:
                    return []
                probs = torch.softmax(pred.logits, dim=1).double().numpy()
                decoded = pred.boxes.double().numpy()
                decoded[:, 0::2] = decoded[:, 0::2].clip(0, float(w))
                decoded[:, 1::2] = decoded[:, 1::2].clip(0, float(h))
        finally:
            self.train(was_training)

        results: list[ScoredBox] = []
        for cls in range(self.num_foreground_classes):
            scores = probs[:, cls]
            mask = scores >= score_thresh
            if not mask.any():
                continue
            cls_boxes, cls_scores = decoded[mask], scores[mask]
            ok = (cls_boxes[:, 2] - cls_boxes[:, 0] > 0) & (cls_boxes[:, 3] - cls_boxes[:, 1] > 0)
            cls_boxes, cls_scores = cls_boxes[ok], cls_scores[ok]
            for k in nms_arrays(cls_boxes, cls_scores, nms_thresh):
                results.append(ScoredBox(Box(*cls_boxes[k]), float(cls_scores[k]), cls))
        results.sort(key=lambda sb: -sb.score)
        return results[:max_detections]


def top_n_proposals(proposals: list, n: int) -> list:
    """First min(n, len) proposals of a score-sorted list."""
    if n < 0:
        raise DetectorError("n must be >= 0")
    return list(proposals[:n])


# ---- target assignment and losses -----------------------------------------

def assign_rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray,
                       pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Anchor labels: 1 positive, 0 negative, -1 ignore; plus matched gt index.

    Positives are anchors at or above pos_iou with any gt, plus each gt's
    highest-overlap anchor (so no gt goes unclaimed).
    """
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    overlaps = iou_matrix(anchors, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    matched = best_gt
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    # force-match: the best anchor per gt is positive even below pos_iou
    for j in range(len(gt_boxes)):
        candidates = np.nonzero(overlaps[:, j] == overlaps[:, j].max())[0]
        labels[candidates] = 1
        matched[candidates] = j
    return labels, matched


def assign_roi_targets(proposals: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray,
                       background_index: int, fg_iou: float = 0.5):
    """RoI labels (background_index for bg) and matched gt index per proposal."""
    n = len(proposals)
    labels = np.full(n, background_index, dtype=np.int64)
    matched = np.zeros(n, dtype=np.int64)
    if len(gt_boxes) == 0 or n == 0:
        return labels, matched
    overlaps = iou_matrix(proposals, gt_boxes)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    fg = best_iou >= fg_iou
    labels[fg] = gt_classes[best_gt[fg]]
    matched = best_gt
    return labels, matched


def sample_balanced(labels: np.ndarray, positive_mask: np.ndarray, batch: int,
                    fg_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Sample up to `batch` indices with at most fg_fraction positives."""
    pos_idx = np.nonzero(positive_mask)[0]
    neg_idx = np.nonzero(~positive_mask & (labels != -1))[0]
    n_pos = min(len(pos_idx), int(round(batch * fg_fraction)))
    n_neg = min(len(neg_idx), batch - n_pos)
    chosen = []
    if n_pos > 0:
        chosen.append(rng.choice(pos_idx, size=n_pos, replace=False))
    if n_neg > 0:
        chosen.append(rng.choice(neg_idx, size=n_neg, replace=False))
    if not chosen:
        return np.zeros(0, dtype=np.int64)
    return np.sort(np.concatenate(chosen))


def roi_loss(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor,
             reg_targets: torch.Tensor, cls_weights: torch.Tensor | None = None,
             reg_mask: torch.Tensor | None = None):
    """Per-image RoI objective: (mean cross-entropy, foreground L1 / N).

    `labels` hold class indices with background last; `reg_targets` are
    encoded deltas, consulted only where labels are foreground. Optional
    `cls_weights` reweight per-proposal classification terms and change the
    normalizer to the weight sum (all-ones weights reduce to the plain mean).
    Optional boolean `reg_mask` further restricts which foreground rows carry
    a regression term; the 1/N normalizer is unchanged.
    """
    n = logits.shape[0]
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, zero.clone()
    background = logits.shape[1] - 1
    per_roi = F.cross_entropy(logits, labels, reduction="none")
    if cls_weights is None:
        l_cls = per_roi.mean()
    else:
        denom = cls_weights.sum().clamp(min=1e-12)
        l_cls = (per_roi * cls_weights).sum() / denom
    fg = labels != background
    if reg_mask is not None:
        fg = fg & reg_mask
    if fg.any():
        l_reg = (deltas[fg] - reg_targets[fg]).abs().sum() / n
    else:
        l_reg = logits.sum() * 0.0
    return l_cls, l_reg


def rpn_loss(logits: torch.Tensor, deltas: torch.Tensor, labels: torch.Tensor,
             reg_targets: torch.Tensor):
    """Sampled-anchor objectness BCE plus positive-anchor L1, both / N."""
    n = logits.shape[0]
    if n == 0:
        zero = logits.sum() * 0.0
        return zero, zero.clone()
    l_obj = F.binary_cross_entropy_with_logits(logits, labels.to(logits.dtype), reduction="mean")
    pos = labels == 1
    if pos.any():
        l_reg = (deltas[pos] - reg_targets[pos]).abs().sum() / n
    else:
        l_reg = logits.sum() * 0.0
    return l_obj, l_reg


# ---- parameter plumbing ----------------------------------------------------

def parameter_groups(model: nn.Module) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
    for name, _ in model.named_parameters():
        groups[group_of(name)].append(name)
    return groups


def state_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    """Named parameters as float numpy arrays (copies)."""
    return {name: p.detach().cpu().numpy().copy() for name, p in model.named_parameters()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = dict(model.named_parameters())
    missing = set(own) - set(arrays)
    extra = set(arrays) - set(own)
    if missing or extra:
        raise DetectorError(f"parameter name mismatch: missing={sorted(missing)[:3]} extra={sorted(extra)[:3]}")
    with torch.no_grad():
        for name, p in own.items():
            arr = arrays[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise DetectorError(f"shape mismatch for {name}: {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))


def init_parameters(model: TwoStageDetector, seed: int) -> None:
    """Deterministic parameter init from purpose-named numpy streams."""
    with torch.no_grad():
        for name, p in sorted(model.named_parameters()):
            rng = stream(seed, "init", name)
            shape = tuple(p.shape)
            if p.ndim >= 2:
                fan_in = int(np.prod(shape[1:]))
                std = (2.0 / fan_in) ** 0.5
                if name.startswith(("roi_classifier.head", "rpn.objectness", "rpn.deltas")):
                    std = 0.01
                elif name.startswith("roi_regressor.head"):
                    std = 0.001
                vals = rng.normal(0.0, std, size=shape)
                p.copy_(torch.from_numpy(vals).to(p.dtype))
            elif name.endswith(".weight"):
                p.fill_(1.0)  # GroupNorm scale
            else:
                p.zero_()


def detector_from_config(det_cfg: dict, num_foreground_classes: int | None = None,
                         dtype: torch.dtype = None) -> TwoStageDetector:
    if dtype is None:
        dtype = {"float32": torch.float32, "float64": torch.float64}[det_cfg.get("dtype", "float32")]
    n_fg = num_foreground_classes if num_foreground_classes is not None else det_cfg["num_foreground_classes"]
    return TwoStageDetector(
        num_foreground_classes=n_fg,
        base_channels=det_cfg["base_channels"],
        fpn_channels=det_cfg["fpn_channels"],
        roi_pool_size=det_cfg["roi_pool_size"],
        roi_hidden=det_cfg["roi_hidden"],
        anchor_ratios=tuple(det_cfg["anchor_ratios"]),
        rpn_pre_nms=det_cfg["rpn_pre_nms"],
        rpn_post_nms=det_cfg["rpn_post_nms"],
        rpn_nms_thresh=det_cfg["rpn_nms_thresh"],
        dtype=dtype,
    )
