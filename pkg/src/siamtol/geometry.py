"""Boxes, anchors, label assignment and context-aware cropping.

Coordinate convention: pixel ``i`` of an image has its centre at coordinate
``i``. Boxes are continuous, so a box ``(cx, cy, w, h)`` spans
``[cx - w/2, cx + w/2] x [cy - h/2, cy + h/2]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive size, got w={self.w} h={self.h}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Top-left corner plus size."""
        return cls(x + w / 2.0, y + h / 2.0, w, h)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0,
                self.cx + self.w / 2.0, self.cy + self.h / 2.0)

    def xywh(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.w, self.h)

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)

    @property
    def area(self) -> float:
        return self.w * self.h


def iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_array(boxes: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """IoU of every centre-form row of ``boxes`` [N, 4] against ``gt``.

    ``gt`` is either one box [4] or an aligned array [N, 4].
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    gt = np.broadcast_to(np.asarray(gt, dtype=np.float64), boxes.shape)
    bx1 = boxes[..., 0] - boxes[..., 2] / 2
    bx2 = boxes[..., 0] + boxes[..., 2] / 2
    by1 = boxes[..., 1] - boxes[..., 3] / 2
    by2 = boxes[..., 1] + boxes[..., 3] / 2
    gx1 = gt[..., 0] - gt[..., 2] / 2
    gx2 = gt[..., 0] + gt[..., 2] / 2
    gy1 = gt[..., 1] - gt[..., 3] / 2
    gy2 = gt[..., 1] + gt[..., 3] / 2
    iw = np.clip(np.minimum(bx2, gx2) - np.maximum(bx1, gx1), 0, None)
    ih = np.clip(np.minimum(by2, gy2) - np.maximum(by1, gy1), 0, None)
    inter = iw * ih
    union = boxes[..., 2] * boxes[..., 3] + gt[..., 2] * gt[..., 3] - inter
    return np.clip(inter / union, 0.0, 1.0)


def encode_box(anchor: BBox, gt: BBox) -> tuple[float, float, float, float]:
    return ((gt.cx - anchor.cx) / anchor.w,
            (gt.cy - anchor.cy) / anchor.h,
            math.log(gt.w / anchor.w),
            math.log(gt.h / anchor.h))


def decode_box(anchor: BBox, deltas: Sequence[float]) -> BBox:
    dx, dy, dw, dh = (float(d) for d in deltas)
    return BBox(anchor.cx + dx * anchor.w,
                anchor.cy + dy * anchor.h,
                anchor.w * math.exp(dw),
                anchor.h * math.exp(dh))


def encode_array(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    gt = np.broadcast_to(np.asarray(gt, dtype=np.float64), anchors.shape)
    out = np.empty(anchors.shape, dtype=np.float64)
    out[..., 0] = (gt[..., 0] - anchors[..., 0]) / anchors[..., 2]
    out[..., 1] = (gt[..., 1] - anchors[..., 1]) / anchors[..., 3]
    out[..., 2] = np.log(gt[..., 2] / anchors[..., 2])
    out[..., 3] = np.log(gt[..., 3] / anchors[..., 3])
    return out


def decode_array(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    out = np.empty(np.broadcast_shapes(anchors.shape, deltas.shape))
    out[..., 0] = anchors[..., 0] + deltas[..., 0] * anchors[..., 2]
    out[..., 1] = anchors[..., 1] + deltas[..., 1] * anchors[..., 3]
    out[..., 2] = anchors[..., 2] * np.exp(deltas[..., 2])
    out[..., 3] = anchors[..., 3] * np.exp(deltas[..., 3])
    return out


# ---------------------------------------------------------------------------
# anchors and labels

@dataclass
class AnchorConfig:
    stride: int = 8
    scales: list[float] = field(default_factory=lambda: [8.0])
    ratios: list[float] = field(default_factory=lambda: [1 / 3, 1 / 2, 1.0, 2.0, 3.0])

    @property
    def num_anchors(self) -> int:
        return len(self.ratios) * len(self.scales)


@dataclass
class AnchorSet:
    """Anchors laid out as ``boxes[a, i, j]`` (centre form) for anchor type
    ``a`` at response row ``i`` / column ``j``, in search-patch pixels."""
    boxes: np.ndarray
    stride: int
    ratios: list[float]
    scales: list[float]

    @property
    def num_anchors(self) -> int:
        return self.boxes.shape[0]

    @property
    def size(self) -> int:
        return self.boxes.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.boxes.reshape(-1, 4)

    def __len__(self) -> int:
        return self.flat.shape[0]

    def bbox(self, index: int) -> BBox:
        return BBox(*self.flat[index])


def generate_anchors(cfg: AnchorConfig, response_size: int,
                     patch_size: int = 255) -> AnchorSet:
    """Tile every (ratio, scale) anchor on a ``response_size`` square grid.

    ``ratio`` is h / w, and the side of a ratio-1 anchor is ``stride * scale``.
    The grid is centred on the patch centre ``(patch_size - 1) / 2``.
    """
    if not cfg.ratios or not cfg.scales:
        raise ValueError("anchor config needs at least one ratio and one scale")
    if response_size < 1 or cfg.stride <= 0:
        raise ValueError("response_size must be >= 1 and stride > 0")
    shapes = []
    for r in cfg.ratios:
        for s in cfg.scales:
            if r <= 0 or s <= 0:
                raise ValueError("ratios and scales must be positive")
            side = cfg.stride * s
            shapes.append((side / math.sqrt(r), side * math.sqrt(r)))
    centre = (patch_size - 1) / 2.0
    offs = centre + (np.arange(response_size) - (response_size - 1) / 2.0) * cfg.stride
    ys, xs = np.meshgrid(offs, offs, indexing="ij")
    boxes = np.empty((len(shapes), response_size, response_size, 4))
    for a, (w, h) in enumerate(shapes):
        boxes[a, ..., 0] = xs
        boxes[a, ..., 1] = ys
        boxes[a, ..., 2] = w
        boxes[a, ..., 3] = h
    return AnchorSet(boxes, cfg.stride, list(cfg.ratios), list(cfg.scales))


@dataclass
class LabelConfig:
    hi_thresh: float = 0.6
    lo_thresh: float = 0.3
    pos_cap: int = 16
    total_cap: int = 64
    subsample: bool = True


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class LabelMap:
    """Per-anchor labels; may carry a leading batch dimension."""
    cls: np.ndarray            # int8, POSITIVE / NEGATIVE / IGNORE
    reg_target: np.ndarray     # [..., 4], NaN except at positives

    @property
    def num_positive(self) -> int:
        return int((self.cls == POSITIVE).sum())

    @property
    def num_negative(self) -> int:
        return int((self.cls == NEGATIVE).sum())

    @property
    def has_positive(self) -> bool:
        return self.num_positive > 0


def stack_labels(maps: Sequence[LabelMap]) -> LabelMap:
    return LabelMap(np.stack([m.cls for m in maps]),
                    np.stack([m.reg_target for m in maps]))


def assign_labels(anchors: AnchorSet, gt: BBox, cfg: LabelConfig | None = None,
                  rng: np.random.Generator | None = None) -> LabelMap:
    cfg = cfg or LabelConfig()
    boxes = anchors.flat
    overlaps = iou_array(boxes, gt.as_array())
    cls = np.full(len(boxes), IGNORE, dtype=np.int8)
    cls[overlaps < cfg.lo_thresh] = NEGATIVE
    cls[overlaps > cfg.hi_thresh] = POSITIVE
    if cfg.subsample:
        if rng is None:
            rng = np.random.default_rng(0)
        pos = np.flatnonzero(cls == POSITIVE)
        if len(pos) > cfg.pos_cap:
            cls[rng.choice(pos, len(pos) - cfg.pos_cap, replace=False)] = IGNORE
        n_pos = int((cls == POSITIVE).sum())
        neg = np.flatnonzero(cls == NEGATIVE)
        neg_cap = max(cfg.total_cap - n_pos, 0)
        if len(neg) > neg_cap:
            cls[rng.choice(neg, len(neg) - neg_cap, replace=False)] = IGNORE
    reg = np.full((len(boxes), 4), np.nan)
    pos = cls == POSITIVE
    if pos.any():
        reg[pos] = encode_array(boxes[pos], gt.as_array())
    return LabelMap(cls, reg)


# ---------------------------------------------------------------------------
# cropping

def context_size(w: float, h: float, context_amount: float = 0.5) -> float:
    """Side of the exemplar crop: sqrt((w + p)(h + p)) with p = (w + h) / 2."""
    p = context_amount * (w + h)
    return math.sqrt((w + p) * (h + p))


def crop_patch(frame: np.ndarray, center: tuple[float, float], side: float,
               out_size: int, fill: np.ndarray | None = None) -> np.ndarray:
    """Square crop of ``side`` pixels around ``center`` resized to ``out_size``.

    ``frame`` is HxWx3. Area outside the frame takes the per-channel mean
    (or ``fill``). Returns float32 HxWx3.
    """
    if side <= 0 or out_size < 1:
        raise ValueError("crop side and out_size must be positive")
    img = np.ascontiguousarray(frame, dtype=np.float32)
    if fill is None:
        fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    k = out_size / side
    c = (out_size - 1) / 2.0
    m = np.array([[k, 0.0, c - center[0] * k],
                  [0.0, k, c - center[1] * k]], dtype=np.float64)
    return cv2.warpAffine(img, m, (out_size, out_size), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT,
                          borderValue=tuple(float(v) for v in fill))


def exemplar_crop(frame: np.ndarray, box: BBox, out_size: int = 127,
                  context_amount: float = 0.5) -> tuple[np.ndarray, float]:
    """Context crop around ``box``; returns (patch, patch pixels per frame pixel)."""
    s_z = context_size(box.w, box.h, context_amount)
    return crop_patch(frame, (box.cx, box.cy), s_z, out_size), out_size / s_z


def search_crop(frame: np.ndarray, box: BBox, exemplar_size: int = 127,
                search_size: int = 255, context_amount: float = 0.5,
                center: tuple[float, float] | None = None) -> tuple[np.ndarray, float]:
    """Search-region crop; same frame-to-patch scale as the exemplar crop."""
    s_z = context_size(box.w, box.h, context_amount)
    s_x = s_z * search_size / exemplar_size
    if center is None:
        center = (box.cx, box.cy)
    return crop_patch(frame, center, s_x, search_size), search_size / s_x
