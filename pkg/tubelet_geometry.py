#!/usr/bin/env python3
"""
Tubelet Geometry Module
Anchor cuboids, box/tubelet overlap, regression parameterization,
tubelet NMS and ground-truth label assignment for proposal training
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionError, GeometryError

MODULE = "tubelet-geometry"

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1

# exp() guard for width/height deltas
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixel units"""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise GeometryError(f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2})", MODULE)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class Tubelet:
    """
    T per-frame boxes of one clip with an actionness score

    boxes is a (T, 4) array of x1, y1, x2, y2. Placeholder members of a
    temporal window carry all-zero boxes.
    """

    boxes: np.ndarray
    actionness: float = 0.0
    class_scores: Optional[np.ndarray] = None
    clip_index: int = 0
    label: Optional[int] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64)
        if self.boxes.ndim != 2 or self.boxes.shape[1] != 4 or self.boxes.shape[0] < 1:
            raise GeometryError(f"tubelet boxes must be T x 4, got {self.boxes.shape}", MODULE)
        if not (0.0 <= self.actionness <= 1.0):
            raise GeometryError(f"actionness {self.actionness} outside [0, 1]", MODULE)
        if self.class_scores is not None:
            self.class_scores = np.asarray(self.class_scores, dtype=np.float64)

    @property
    def T(self) -> int:
        return self.boxes.shape[0]

    def box(self, t: int) -> Box:
        return Box.from_array(self.boxes[t])

    def with_scores(self, actionness: Optional[float] = None,
                    class_scores: Optional[np.ndarray] = None) -> "Tubelet":
        return Tubelet(self.boxes.copy(),
                       self.actionness if actionness is None else actionness,
                       self.class_scores if class_scores is None else class_scores,
                       self.clip_index, self.label)


@dataclass
class AnchorGrid:
    """Feature-map lattice of anchor cuboids"""

    feature_height: int
    feature_width: int
    stride: int
    scales: Sequence[float] = (8.0, 16.0, 32.0)
    aspect_ratios: Sequence[float] = (0.5, 1.0, 2.0)
    T: int = 8

    def __post_init__(self):
        if min(self.feature_height, self.feature_width, self.stride, self.T) < 1:
            raise GeometryError("anchor grid dimensions must be positive", MODULE)
        if not self.scales or not self.aspect_ratios:
            raise GeometryError("anchor grid needs at least one scale and one ratio", MODULE)

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    @property
    def count(self) -> int:
        return self.feature_height * self.feature_width * self.anchors_per_cell


@dataclass
class AnchorAssignment:
    """Per-anchor training labels and regression targets"""

    labels: np.ndarray
    matched_gt: np.ndarray
    regression_targets: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


# ---------------------------------------------------------------------------
# Overlap
# ---------------------------------------------------------------------------

def _box_array(box) -> np.ndarray:
    if isinstance(box, Box):
        return box.as_array()
    return np.asarray(box, dtype=np.float64)


def stack_boxes(tubelets) -> np.ndarray:
    """(n, T, 4) array from a sequence of tubelets or an array"""
    if isinstance(tubelets, np.ndarray):
        return tubelets.astype(np.float64, copy=False)
    if len(tubelets) == 0:
        return np.zeros((0, 1, 4), dtype=np.float64)
    return np.stack([t.boxes for t in tubelets])


def pairwise_box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    IoU between every box pair along the second-to-last axis

    a and b broadcast as (..., n, 1, 4) against (..., 1, m, 4); zero-area
    unions give 0.
    """
    a = a[..., :, None, :]
    b = b[..., None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0.0, None) * np.clip(a[..., 3] - a[..., 1], 0.0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0.0, None) * np.clip(b[..., 3] - b[..., 1], 0.0, None)
    union = area_a + area_b - inter
    safe = np.where(union > 0, union, 1.0)
    return np.where(union > 0, inter / safe, 0.0)


def box_iou(a, b) -> float:
    """Intersection over union of two boxes; disjoint boxes give 0"""
    return float(pairwise_box_iou(_box_array(a)[None], _box_array(b)[None])[0, 0])


def pairwise_tubelet_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Mean per-frame IoU for tubelet arrays a (n, T, 4) and b (m, T, 4) -> (n, m)"""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"tubelet lengths differ: {a.shape[1]} vs {b.shape[1]}", MODULE)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    # frame axis first so the pairwise helper works per frame
    per_frame = pairwise_box_iou(np.transpose(a, (1, 0, 2)), np.transpose(b, (1, 0, 2)))
    return per_frame.mean(axis=0)


def tubelet_iou(a: Tubelet, b: Tubelet) -> float:
    """Average of per-frame box IoU over the T frames"""
    if a.T != b.T:
        raise DimensionError(f"tubelet lengths differ: {a.T} vs {b.T}", MODULE)
    return float(pairwise_tubelet_iou(a.boxes[None], b.boxes[None])[0, 0])


# ---------------------------------------------------------------------------
# Anchors and regression
# ---------------------------------------------------------------------------

def anchor_boxes(grid: AnchorGrid) -> np.ndarray:
    """(count, 4) anchor boxes ordered by row, column, scale, ratio"""
    rows = []
    shapes = [(s * math.sqrt(r), s / math.sqrt(r)) for s in grid.scales for r in grid.aspect_ratios]
    for i in range(grid.feature_height):
        cy = (i + 0.5) * grid.stride
        for j in range(grid.feature_width):
            cx = (j + 0.5) * grid.stride
            for w, h in shapes:
                rows.append((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
    return np.asarray(rows, dtype=np.float64)


def anchor_tubelet_boxes(grid: AnchorGrid) -> np.ndarray:
    """(count, T, 4) anchor cuboids: each box repeated over the T frames"""
    boxes = anchor_boxes(grid)
    return np.repeat(boxes[:, None, :], grid.T, axis=1)


def generate_anchors(grid: AnchorGrid) -> List[Tubelet]:
    """One anchor cuboid per (cell, scale, ratio), centred at (cell + 0.5) * stride"""
    return [Tubelet(boxes) for boxes in anchor_tubelet_boxes(grid)]


def _centers(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_boxes(anchor_boxes_: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """Vectorized (..., T, 4) encoding -> (..., 4T) deltas, frame-major"""
    if anchor_boxes_.shape != gt_boxes.shape:
        raise DimensionError(f"anchor {anchor_boxes_.shape} vs gt {gt_boxes.shape}", MODULE)
    acx, acy, aw, ah = _centers(anchor_boxes_)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise GeometryError("degenerate anchor (zero width or height)", MODULE)
    gcx, gcy, gw, gh = _centers(gt_boxes)
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise GeometryError("degenerate ground-truth box", MODULE)
    deltas = np.stack([(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)
    return deltas.reshape(deltas.shape[:-2] + (-1,))


def encode_targets(anchor: Tubelet, gt: Tubelet) -> np.ndarray:
    """Per-frame (tx, ty, tw, th) of gt relative to anchor, flattened to 4T"""
    if anchor.T != gt.T:
        raise DimensionError(f"tubelet lengths differ: {anchor.T} vs {gt.T}", MODULE)
    return encode_boxes(anchor.boxes, gt.boxes)


def decode_deltas(anchor_boxes_: np.ndarray, deltas: np.ndarray,
                  image_size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """
    Inverse of encode_boxes for arrays

    Args:
        anchor_boxes_: (..., T, 4) reference boxes
        deltas: (..., 4T) regression values
        image_size: (height, width) to clip to, or None for no clipping

    Returns:
        (..., T, 4) decoded boxes
    """
    T = anchor_boxes_.shape[-2]
    d = np.asarray(deltas, dtype=np.float64)
    if d.shape[-1] != 4 * T:
        raise DimensionError(f"expected {4 * T} deltas, got {d.shape[-1]}", MODULE)
    d = d.reshape(d.shape[:-1] + (T, 4))
    acx, acy, aw, ah = _centers(anchor_boxes_)
    cx = acx + d[..., 0] * aw
    cy = acy + d[..., 1] * ah
    w = aw * np.exp(np.minimum(d[..., 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[..., 3], MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes: np.ndarray, image_size: Tuple[int, int]) -> np.ndarray:
    """Clip to the image and enforce a minimum size of one pixel"""
    height, width = float(image_size[0]), float(image_size[1])
    out = boxes.copy()
    out[..., 0] = np.clip(out[..., 0], 0.0, width)
    out[..., 2] = np.clip(out[..., 2], 0.0, width)
    out[..., 1] = np.clip(out[..., 1], 0.0, height)
    out[..., 3] = np.clip(out[..., 3], 0.0, height)
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        thin = out[..., hi] - out[..., lo] < 1.0
        out[..., hi] = np.where(thin, np.minimum(out[..., lo] + 1.0, limit), out[..., hi])
        out[..., lo] = np.where(thin, out[..., hi] - 1.0, out[..., lo])
    return out


def decode_boxes(anchor: Tubelet, deltas: np.ndarray,
                 image_size: Optional[Tuple[int, int]] = None) -> Tubelet:
    """Apply 4T deltas to an anchor cuboid; clipped to image_size when given"""
    boxes = decode_deltas(anchor.boxes, deltas, image_size)
    return Tubelet(boxes, anchor.actionness, anchor.class_scores, anchor.clip_index)


# ---------------------------------------------------------------------------
# Label assignment and NMS
# ---------------------------------------------------------------------------

def assign_labels(anchors, gts, positive_iou: float = 0.5,
                  negative_iou_ceiling: Optional[float] = None) -> AnchorAssignment:
    """
    Label anchors for proposal training

    An anchor is positive when its tubelet IoU with some ground truth exceeds
    positive_iou, or when it is the best remaining anchor for a ground truth
    (ground truths are served in order, ties go to the lower anchor index).
    Positive anchors match their max-IoU ground truth, except that the anchor
    chosen for a ground truth by the second rule is matched to that ground
    truth. Everything else is negative, or ignored when its best IoU reaches
    negative_iou_ceiling.

    Args:
        anchors: sequence of Tubelet or (A, T, 4) array
        gts: sequence of Tubelet or (G, T, 4) array
        positive_iou: rule (a) threshold (strict)
        negative_iou_ceiling: optional lower edge of an ignore band

    Returns:
        AnchorAssignment
    """
    anchor_arr = stack_boxes(anchors)
    gt_arr = stack_boxes(gts)
    num_anchors = anchor_arr.shape[0]
    labels = np.full(num_anchors, NEGATIVE, dtype=np.int64)
    matched = np.full(num_anchors, -1, dtype=np.int64)
    if len(gts) == 0 or num_anchors == 0:
        return AnchorAssignment(labels, matched, {})

    iou = pairwise_tubelet_iou(anchor_arr, gt_arr)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(num_anchors), best_gt]

    if negative_iou_ceiling is not None:
        labels[best_iou >= negative_iou_ceiling] = IGNORE
    rule_a = best_iou > positive_iou
    labels[rule_a] = POSITIVE
    matched[rule_a] = best_gt[rule_a]

    claimed = np.zeros(num_anchors, dtype=bool)
    for g in range(gt_arr.shape[0]):
        column = np.where(claimed, -np.inf, iou[:, g])
        a = int(np.argmax(column))
        claimed[a] = True
        labels[a] = POSITIVE
        matched[a] = g

    targets = {}
    for a in np.flatnonzero(labels == POSITIVE):
        targets[int(a)] = encode_boxes(anchor_arr[a], gt_arr[matched[a]])
    return AnchorAssignment(labels, matched, targets)


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                keep_top: Optional[int] = None) -> List[int]:
    """Greedy suppression over (n, T, 4) boxes; returns kept indices by descending score"""
    if not (0.0 < iou_threshold <= 1.0):
        raise GeometryError(f"NMS threshold {iou_threshold} outside (0, 1]", MODULE)
    scores = np.asarray(scores, dtype=np.float64)
    # stable sort keeps the lower index first among equal scores
    order = np.argsort(-scores, kind="stable")
    alive = np.ones(len(order), dtype=bool)
    keep: List[int] = []
    limit = len(order) if keep_top is None else keep_top
    for pos, idx in enumerate(order):
        if len(keep) >= limit:
            break
        if not alive[pos]:
            continue
        keep.append(int(idx))
        rest = order[pos + 1:]
        if rest.size:
            ious = pairwise_tubelet_iou(boxes[idx][None], boxes[rest])[0]
            alive[pos + 1:] &= ious <= iou_threshold
    return keep


def nms_tubelets(tubelets: Sequence[Tubelet], iou_threshold: float = 0.7,
                 keep_top: int = 300) -> List[Tubelet]:
    """Suppress tubelets overlapping a higher-actionness survivor by more than iou_threshold"""
    if len(tubelets) == 0:
        return []
    keep = nms_indices(stack_boxes(tubelets), [t.actionness for t in tubelets],
                       iou_threshold, keep_top)
    return [tubelets[i] for i in keep]
