"""Episodic training: target assignment, losses, the optimizer loop, and
fine-tuning on a handful of labeled real pages."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict, replace
from typing import Sequence

import numpy as np

from . import numerics as nn
from .checkpoint import Checkpoint
from .datagen import (
    Atlas,
    ComposeConfig,
    Glyph,
    LineSample,
    normalize_canvas,
    sample_episode,
    trim_to_ink,
)
from .detector import ModelConfig, SiameseDetector
from .geometry import Anchor, BBox, encode_delta, iou_matrix
from .numerics import Tensor

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "SkipBatch",
    "assign_targets",
    "detection_loss",
    "train",
    "fine_tune",
    "SGD",
    "TrainResult",
]


class SkipBatch(Exception):
    """Signals a batch with no usable (non-ignored) samples."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    iterations: int = 2000  # (line, class) update steps
    n_way: int = 5
    k_shot: int = 1
    lines_per_episode: int = 2
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    head_pos_iou: float = 0.5
    head_neg_iou: float = 0.5
    cls_weight: float = 1.0
    reg_weight: float = 1.0
    sample_size: int = 64
    train_proposal_count: int = 32
    finetune_lr_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for pos, neg in ((self.rpn_pos_iou, self.rpn_neg_iou), (self.head_pos_iou, self.head_neg_iou)):
            if not (0.0 < neg <= pos <= 1.0):
                raise ValueError(f"need 0 < neg <= pos <= 1, got pos={pos} neg={neg}")

    def to_dict(self) -> dict:
        return asdict(self)


_boxes_array_cache: dict[int, tuple] = {}


def _boxes_array_cached(items) -> tuple[np.ndarray, list[Anchor]]:
    """Memoized _boxes_array for the model's cached anchor lists."""
    if isinstance(items, list) and items and isinstance(items[0], Anchor):
        hit = _boxes_array_cache.get(id(items))
        if hit is not None and hit[0] is items:
            return hit[1]
        result = _boxes_array(items)
        if len(_boxes_array_cache) > 64:
            _boxes_array_cache.clear()
        _boxes_array_cache[id(items)] = (items, result)
        return result
    return _boxes_array(items)


def _boxes_array(items) -> tuple[np.ndarray, list[Anchor]]:
    """Normalize anchors/proposals to an (N, 4) array plus Anchor views."""
    arr = np.empty((len(items), 4), dtype=np.float64)
    anchors: list[Anchor] = []
    for i, it in enumerate(items):
        if isinstance(it, Anchor):
            b = it.as_bbox()
            anchors.append(it)
        elif isinstance(it, BBox):
            b = it
            anchors.append(
                Anchor(*b.center, max(b.width, 1.0), max(b.height, 1.0), (0, 0, i))
            )
        else:
            b = BBox(*it)
            anchors.append(
                Anchor(*b.center, max(b.width, 1.0), max(b.height, 1.0), (0, 0, i))
            )
        arr[i] = b.as_tuple()
    return arr, anchors


def assign_targets(
    anchors_or_proposals: Sequence,
    gt_boxes: Sequence[BBox],
    pos_threshold: float,
    neg_threshold: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Label each candidate 1 / 0 / -1 (ignore) by IoU against the ground
    truth of the current support class, with regression targets for positives.

    Every GT's best-overlapping candidate is forced positive.
    """
    boxes, anchors = _boxes_array_cached(anchors_or_proposals)
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int8)
    targets = np.zeros((n, 4), dtype=np.float64)
    if not gt_boxes:
        return labels, targets
    gt_arr = np.array([g.as_tuple() for g in gt_boxes], dtype=np.float64)
    ious = iou_matrix(boxes, gt_arr)  # (n, G)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[best_iou <= neg_threshold] = 0
    labels[(best_iou > neg_threshold) & (best_iou < pos_threshold)] = -1
    labels[best_iou >= pos_threshold] = 1
    # force the best candidate for each GT positive
    for g in range(len(gt_boxes)):
        col = ious[:, g]
        if col.max() > 0.0:
            i = int(col.argmax())
            labels[i] = 1
            best_gt[i] = g
    for i in np.flatnonzero(labels == 1):
        d = encode_delta(gt_boxes[best_gt[i]], anchors[i])
        targets[i] = (d.tx, d.ty, d.tw, d.th)
    return labels, targets


def _sample_indices(
    labels: np.ndarray, rng: np.random.Generator, sample_size: int
) -> tuple[np.ndarray, np.ndarray]:
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), sample_size // 4)
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    # at most 3 negatives per positive keeps the batch from drowning in background
    cap = 3 * max(n_pos, 1) if n_pos > 0 else sample_size // 4
    n_neg = min(len(neg), cap, sample_size - n_pos)
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    return np.sort(pos), np.sort(neg)


def detection_loss(
    logits: Tensor,
    deltas: Tensor,
    labels: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    cfg: TrainConfig,
) -> tuple[Tensor, dict]:
    """BCE over a sampled anchor subset plus smooth-L1 over the positives."""
    pos, neg = _sample_indices(labels, rng, cfg.sample_size)
    sampled = np.concatenate([pos, neg])
    if len(sampled) == 0:
        raise SkipBatch("no non-ignored samples")
    cls = nn.bce_with_logits(nn.take_rows(logits, sampled), labels[sampled].astype(np.float64))
    breakdown = {"cls": float(cls.data)}
    total = nn.scale(cls, cfg.cls_weight)
    if len(pos) > 0:
        reg = nn.smooth_l1(nn.take_rows(deltas, pos), targets[pos])
        breakdown["reg"] = float(reg.data)
        total = nn.add(total, nn.scale(reg, cfg.reg_weight))
    else:
        breakdown["reg"] = 0.0
    breakdown["total"] = float(total.data)
    if not math.isfinite(breakdown["total"]):
        raise FloatingPointError(f"non-finite loss: {breakdown}")
    return total, breakdown


class SGD:
    """Stochastic gradient descent with classical momentum."""

    def __init__(self, params, learning_rate: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = learning_rate
        self.momentum = momentum
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        for p in self.params:
            if p.grad is None:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[tuple[int, float, float, float]]  # (iteration, total, cls, reg)


def _train_step(
    model: SiameseDetector,
    line: LineSample,
    support_images: Sequence[np.ndarray],
    class_id: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: SGD,
) -> dict:
    state = model.rpn_forward(line.image, support_images)
    gt_boxes = [b for b, cid in line.gt if cid == class_id]

    rpn_labels, rpn_targets = assign_targets(
        state.anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou
    )
    obj_flat = nn.reshape(state.rpn_obj, (-1,))
    delta_flat = nn.reshape(state.rpn_delta, (-1, 4))
    rpn_loss, rpn_info = detection_loss(obj_flat, delta_flat, rpn_labels, rpn_targets, rng, cfg)

    proposals = [b for b, _ in model.propose_regions(state)][: cfg.train_proposal_count]
    proposals += gt_boxes  # guarantee the head sees positives from step one
    head_info = {"cls": 0.0, "reg": 0.0, "total": 0.0}
    total = rpn_loss
    if proposals:
        head_labels, head_targets = assign_targets(
            proposals, gt_boxes, cfg.head_pos_iou, cfg.head_neg_iou
        )
        logits, deltas = model.head_forward(
            state.query_features, state.support_features, proposals
        )
        try:
            head_loss, head_info = detection_loss(
                logits, deltas, head_labels, head_targets, rng, cfg
            )
            total = nn.add(total, head_loss)
        except SkipBatch:
            pass

    opt.zero_grad()
    total.backward()
    opt.step()
    return {
        "total": float(total.data),
        "cls": rpn_info["cls"] + head_info["cls"],
        "reg": rpn_info["reg"] + head_info["reg"],
    }


def train(
    atlas: Atlas,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    compose_cfg: ComposeConfig | None = None,
) -> TrainResult:
    """Episodic loop: sample an episode, then one update per (line, class)."""
    compose_cfg = compose_cfg or ComposeConfig()
    model = SiameseDetector(model_cfg, seed=cfg.seed)
    opt = SGD(model.parameters(), cfg.learning_rate, cfg.momentum)
    ep_rng = np.random.default_rng([cfg.seed, 11])
    loss_rng = np.random.default_rng([cfg.seed, 13])
    trace: list[tuple[int, float, float, float]] = []
    step = 0
    while step < cfg.iterations:
        episode = sample_episode(
            atlas, "train", cfg.n_way, cfg.k_shot, ep_rng, compose_cfg,
            n_query_lines=cfg.lines_per_episode,
        )
        supports = {
            cid: [normalize_canvas(g.image, model_cfg.support_size) for g in glyphs]
            for cid, glyphs in episode.support.items()
        }
        for line in episode.queries:
            for cid in sorted(supports):
                if step >= cfg.iterations:
                    break
                try:
                    info = _train_step(model, line, supports[cid], cid, cfg, loss_rng, opt)
                except SkipBatch:
                    continue
                trace.append((step, info["total"], info["cls"], info["reg"]))
                step += 1
    ckpt = Checkpoint.from_model(model)
    return TrainResult(ckpt, trace)


def _page_crops(pages: Sequence[Sequence[LineSample]], canvas: int) -> dict[int, list[tuple[int, np.ndarray]]]:
    """class_id -> [(line_key, support canvas image)] cropped from page GT."""
    crops: dict[int, list[tuple[int, np.ndarray]]] = {}
    key = 0
    for page in pages:
        for line in page:
            for box, cid in line.gt:
                x1, y1 = int(box.x1), int(box.y1)
                x2, y2 = int(np.ceil(box.x2)), int(np.ceil(box.y2))
                patch = line.image[y1:y2, x1:x2]
                if not np.any(patch > 0):
                    continue
                crops.setdefault(cid, []).append((key, normalize_canvas(trim_to_ink(patch), canvas)))
            key += 1
    return crops


def fine_tune(
    checkpoint: Checkpoint,
    labeled_pages: Sequence[Sequence[LineSample]],
    cfg: TrainConfig,
) -> TrainResult:
    """Retrain briefly on labeled pages of the target cipher.

    Supports are cropped from the pages' own GT boxes, avoiding the query
    line they came from when another source exists. Learning rate is scaled
    by cfg.finetune_lr_scale.
    """
    if not labeled_pages or all(len(p) == 0 for p in labeled_pages):
        return TrainResult(checkpoint, [])
    model = checkpoint.to_model()
    canvas = model.cfg.support_size
    crops = _page_crops(labeled_pages, canvas)
    usable = {cid: lst for cid, lst in crops.items() if len(lst) >= 1}
    for cid in sorted(set(crops) - set(usable)):
        log.warning("fine_tune: class %d has no usable GT crops; excluded", cid)
    if not usable:
        return TrainResult(checkpoint, [])
    lines: list[tuple[int, LineSample]] = []
    key = 0
    for page in labeled_pages:
        for line in page:
            lines.append((key, line))
            key += 1
    class_ids = sorted(usable)
    opt = SGD(model.parameters(), cfg.learning_rate * cfg.finetune_lr_scale, cfg.momentum)
    rng = np.random.default_rng([cfg.seed, 29])
    loss_rng = np.random.default_rng([cfg.seed, 31])
    trace: list[tuple[int, float, float, float]] = []
    step = 0
    while step < cfg.iterations:
        key, line = lines[int(rng.integers(len(lines)))]
        present = sorted({cid for _, cid in line.gt if cid in usable})
        if not present:
            continue
        n_other = min(max(cfg.n_way - 1, 0), len(class_ids) - 1)
        chosen = {present[int(rng.integers(len(present)))]}
        others = [c for c in class_ids if c not in chosen]
        if n_other and others:
            chosen.update(int(c) for c in rng.choice(others, size=min(n_other, len(others)), replace=False))
        for cid in sorted(chosen):
            if step >= cfg.iterations:
                break
            pool = [img for k, img in usable[cid] if k != key]
            if not pool:
                pool = [img for _, img in usable[cid]]
            picks = rng.choice(len(pool), size=min(cfg.k_shot, len(pool)), replace=False)
            supports = [pool[int(i)] for i in picks]
            try:
                info = _train_step(model, line, supports, cid, cfg, loss_rng, opt)
            except SkipBatch:
                continue
            trace.append((step, info["total"], info["cls"], info["reg"]))
            step += 1
    return TrainResult(Checkpoint.from_model(model), trace)
