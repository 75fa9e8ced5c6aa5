"""Axis-aligned box arithmetic: IoU, NMS, anchor grids and box-delta coding.

Boxes live in pixel space with the origin at the top-left corner, x growing
rightward and y downward. Everything here is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "BBox",
    "Anchor",
    "BoxDelta",
    "Detection",
    "iou",
    "iou_matrix",
    "nms",
    "generate_anchors",
    "encode_delta",
    "decode_delta",
    "clip_box",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box (x1, y1) top-left, (x2, y2) bottom-right, inclusive of area."""

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

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class Anchor:
    """A prior box described by its center and size, tagged with its grid slot."""

    center_x: float
    center_y: float
    width: float
    height: float
    grid_index: tuple[int, int, int]  # (row, col, shape_index)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"anchor must have positive size: {self}")

    def as_bbox(self) -> BBox:
        return BBox(
            self.center_x - 0.5 * self.width,
            self.center_y - 0.5 * self.height,
            self.center_x + 0.5 * self.width,
            self.center_y + 0.5 * self.height,
        )


@dataclass(frozen=True)
class BoxDelta:
    """Center offsets normalized by anchor size plus log scale ratios."""

    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class Detection:
    """A scored, class-tagged box emitted by the detector for one support class."""

    box: BBox
    class_id: int
    score: float


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area.

    A zero-area box has IoU 0 with everything.
    """
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS over (N, 4) xyxy boxes; returns kept indices in keep order.

    Candidates are ranked by score descending, ties by (x1 asc, y1 asc).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((boxes[:, 1], boxes[:, 0], -scores))
    ranked = boxes[order]
    full = iou_matrix(ranked, ranked)
    alive = np.ones(len(order), dtype=bool)
    kept: list[int] = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        kept.append(int(order[pos]))
        alive[pos + 1 :] &= full[pos, pos + 1 :] < iou_threshold
    return kept


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-score remaining detection and discards the
    rest with IoU >= iou_threshold against it. Output is sorted by score
    descending, ties broken by (x1 asc, y1 asc).
    """
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms_arrays(boxes, scores, iou_threshold)]


def generate_anchors(
    feat_w: int,
    feat_h: int,
    stride: int,
    scales: Sequence[float],
    ratios: Sequence[float],
) -> list[Anchor]:
    """One anchor per (cell, scale, ratio), centered on the cell.

    Ordering is row-major over cells, then scale-major over shapes. A scale s
    with ratio r yields a box of area s*s with height/width = r.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if not scales or not ratios:
        raise ValueError("scales and ratios must be non-empty")
    anchors = []
    for row in range(feat_h):
        cy = (row + 0.5) * stride
        for col in range(feat_w):
            cx = (col + 0.5) * stride
            shape = 0
            for s in scales:
                for r in ratios:
                    w = s / math.sqrt(r)
                    h = s * math.sqrt(r)
                    anchors.append(Anchor(cx, cy, w, h, (row, col, shape)))
                    shape += 1
    return anchors


def encode_delta(gt: BBox, anchor: Anchor) -> BoxDelta:
    """Faster-R-CNN style center/log-size coding of gt relative to anchor."""
    gw = gt.width
    gh = gt.height
    if gw <= 0 or gh <= 0:
        raise ValueError(f"cannot encode zero-size ground truth box: {gt}")
    gx, gy = gt.center
    return BoxDelta(
        tx=(gx - anchor.center_x) / anchor.width,
        ty=(gy - anchor.center_y) / anchor.height,
        tw=math.log(gw / anchor.width),
        th=math.log(gh / anchor.height),
    )


def decode_delta(d: BoxDelta, anchor: Anchor) -> BBox:
    """Exact inverse of encode_delta. The caller clips to image bounds."""
    cx = anchor.center_x + d.tx * anchor.width
    cy = anchor.center_y + d.ty * anchor.height
    w = anchor.width * math.exp(d.tw)
    h = anchor.height * math.exp(d.th)
    return BBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def clip_box(b: BBox, width: float, height: float) -> BBox:
    """Clip a box to the image rectangle [0, width] x [0, height]."""
    x1 = min(max(b.x1, 0.0), width)
    y1 = min(max(b.y1, 0.0), height)
    x2 = min(max(b.x2, 0.0), width)
    y2 = min(max(b.y2, 0.0), height)
    return BBox(x1, y1, max(x2, x1), max(y2, y1))
