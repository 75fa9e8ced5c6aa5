"""The Siamese few-shot detection network: shared backbone, attention RPN,
ROI pooling, support-query feature combination, and prediction head."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import numerics as nn
from .geometry import (
    Anchor,
    BBox,
    BoxDelta,
    Detection,
    clip_box,
    decode_delta,
    generate_anchors,
    nms,
    nms_arrays,
)
from .numerics import Parameter, Tensor

__all__ = ["ModelConfig", "SiameseDetector", "ForwardState"]


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (32, 64, 128, 256)  # paper scale: VGG16 widths
    output_stride: int = 8
    roi_size: int = 7
    anchor_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_channels: int = 256
    rpn_pre_nms_count: int = 600
    rpn_nms_iou: float = 0.7
    rpn_proposal_count: int = 100
    head_width: int = 512
    k_shot_fusion: str = "mean"
    confidence_thresholds: tuple[float, ...] = (0.4, 0.6, 0.8)
    interruption_px: int = 15
    line_height: int = 64
    support_size: int = 48
    class_nms_iou: float = 0.3
    score_floor: float = 0.05
    roi_align: bool = False  # quantized max pooling unless set

    def __post_init__(self):
        if self.roi_size != 7:
            raise ValueError("roi_size is fixed at 7")
        if not all(0.0 < t < 1.0 for t in self.confidence_thresholds):
            raise ValueError("confidence thresholds must lie in (0, 1)")
        if self.interruption_px <= 0:
            raise ValueError("interruption_px must be positive")

    @property
    def feature_channels(self) -> int:
        return self.backbone_channels[-1]

    @property
    def anchors_per_cell(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("backbone_channels", "anchor_scales", "anchor_ratios", "confidence_thresholds"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for key in ("backbone_channels", "anchor_scales", "anchor_ratios", "confidence_thresholds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ForwardState:
    """Intermediate tensors of one (line, class) pass, kept for the loss."""

    query_features: Tensor
    support_features: list[Tensor]
    support_vector: Tensor
    attention: Tensor
    rpn_obj: Tensor  # (Hf, Wf, A) logits
    rpn_delta: Tensor  # (Hf, Wf, 4A)
    anchors: list[Anchor]
    image_size: tuple[int, int]  # (height, width) pixels
    feat_size: tuple[int, int]  # (Hf, Wf)


class SiameseDetector:
    """Query and support share one backbone parameter set (Siamese weights)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng([97, seed])
        self._build(rng)

    # -- construction -------------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(name, data.astype(self.dtype))
        self.params[name] = p
        return p

    def _conv_pair(self, rng, name: str, cin: int, cout: int, k: int = 3):
        w = nn.he_uniform(rng, (k, k, cin, cout), fan_in=k * k * cin, dtype=self.dtype)
        self._param(f"{name}.weight", w)
        self._param(f"{name}.bias", np.zeros(cout, dtype=self.dtype))

    def _fc_pair(self, rng, name: str, din: int, dout: int):
        w = nn.he_uniform(rng, (din, dout), fan_in=din, dtype=self.dtype)
        self._param(f"{name}.weight", w)
        self._param(f"{name}.bias", np.zeros(dout, dtype=self.dtype))

    def _build(self, rng):
        cfg = self.cfg
        self._n_pools = int(round(math.log2(cfg.output_stride)))
        if 2**self._n_pools != cfg.output_stride:
            raise ValueError("output_stride must be a power of two")
        if self._n_pools > len(cfg.backbone_channels):
            raise ValueError("more pooling stages than backbone blocks")
        cin = 1
        for bi, ch in enumerate(cfg.backbone_channels):
            self._conv_pair(rng, f"backbone.block{bi}.conv1", cin, ch)
            self._conv_pair(rng, f"backbone.block{bi}.conv2", ch, ch)
            cin = ch
        c = cfg.feature_channels
        a = cfg.anchors_per_cell
        self._conv_pair(rng, "rpn.conv", c, cfg.rpn_channels)
        self._conv_pair(rng, "rpn.obj", cfg.rpn_channels, a, k=1)
        self._conv_pair(rng, "rpn.delta", cfg.rpn_channels, 4 * a, k=1)
        d = cfg.roi_size * cfg.roi_size * c
        self._fc_pair(rng, "head.fc1", d, cfg.head_width)
        self._fc_pair(rng, "head.fc2", cfg.head_width, cfg.head_width)
        self._fc_pair(rng, "head.score", cfg.head_width, 1)
        self._fc_pair(rng, "head.delta", cfg.head_width, 4)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "SiameseDetector":
        """Copy of the model with parameters cast (used for 64-bit checks)."""
        other = SiameseDetector(self.cfg, dtype=dtype)
        for name, p in other.params.items():
            p.data = self.params[name].data.astype(dtype)
        return other

    # -- forward pieces -----------------------------------------------------

    def _conv(self, x: Tensor, name: str, padding: int) -> Tensor:
        return nn.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def extract_features(self, image: np.ndarray | Tensor) -> Tensor:
        """VGG-style stack: per block two 3x3 convs + ReLU, pooling down to
        the configured output stride. Same weights for query and support."""
        if isinstance(image, Tensor):
            x = image
        else:
            image = np.asarray(image, dtype=self.dtype)
            if image.ndim == 2:
                image = image[:, :, None]
            x = Tensor(image)
        min_side = self.cfg.output_stride
        if x.shape[0] < min_side or x.shape[1] < min_side:
            raise ValueError(f"image {x.shape} smaller than one stride cell ({min_side})")
        for bi in range(len(self.cfg.backbone_channels)):
            x = nn.relu(self._conv(x, f"backbone.block{bi}.conv1", padding=1))
            x = nn.relu(self._conv(x, f"backbone.block{bi}.conv2", padding=1))
            if bi < self._n_pools:
                x = nn.maxpool2(x)
        return x

    def pool_support(self, support_features: Sequence[Tensor]) -> Tensor:
        """Per-map global average pooling, then mean over the K shots."""
        pooled = [nn.global_avg_pool(sf) for sf in support_features]
        acc = pooled[0]
        for t in pooled[1:]:
            acc = nn.add(acc, t)
        return nn.scale(acc, 1.0 / len(pooled))

    def attention_map(self, support_vector: Tensor, query_features: Tensor) -> Tensor:
        """A[w,h,c] = S[c] * Q[w,h,c] (depth-wise modulation of the query)."""
        if support_vector.shape[-1] != query_features.shape[-1]:
            raise nn.ShapeError("attention_map", support_vector.shape, query_features.shape)
        return nn.elem_mul(query_features, support_vector)

    def _anchors(self, wf: int, hf: int) -> list[Anchor]:
        if not hasattr(self, "_anchor_cache"):
            self._anchor_cache = {}
        key = (wf, hf)
        if key not in self._anchor_cache:
            anchors = generate_anchors(
                wf, hf, self.cfg.output_stride, self.cfg.anchor_scales, self.cfg.anchor_ratios
            )
            geom = np.array(
                [(a.center_x, a.center_y, a.width, a.height) for a in anchors], dtype=np.float64
            )
            self._anchor_cache[key] = (anchors, geom)
        return self._anchor_cache[key][0]

    def _anchor_geometry(self, wf: int, hf: int) -> np.ndarray:
        self._anchors(wf, hf)
        return self._anchor_cache[(wf, hf)][1]

    def _rpn_heads(self, attention: Tensor) -> tuple[Tensor, Tensor]:
        mid = nn.relu(self._conv(attention, "rpn.conv", padding=1))
        obj = self._conv(mid, "rpn.obj", padding=0)
        delta = self._conv(mid, "rpn.delta", padding=0)
        return obj, delta

    def rpn_forward(self, line_image: np.ndarray, support_images: Sequence[np.ndarray]) -> ForwardState:
        """Everything up to and including the RPN heads, with tensors retained."""
        qf = self.extract_features(line_image)
        sfs = [self.extract_features(s) for s in support_images]
        svec = self.pool_support(sfs)
        att = self.attention_map(svec, qf)
        obj, delta = self._rpn_heads(att)
        hf, wf = qf.shape[0], qf.shape[1]
        anchors = self._anchors(wf, hf)
        return ForwardState(
            query_features=qf,
            support_features=sfs,
            support_vector=svec,
            attention=att,
            rpn_obj=obj,
            rpn_delta=delta,
            anchors=anchors,
            image_size=(line_image.shape[0], line_image.shape[1]),
            feat_size=(hf, wf),
        )

    def propose_regions(self, state: ForwardState) -> list[tuple[BBox, float]]:
        """Decode RPN outputs against the anchors, clip, NMS, keep top-k.

        Pure post-processing on detached values; gradients flow through the
        RPN tensors in the loss, not through box selection.
        """
        cfg = self.cfg
        h_img, w_img = state.image_size
        scores = _sigmoid_np(state.rpn_obj.data.reshape(-1))
        deltas = state.rpn_delta.data.reshape(-1, 4)
        hf, wf = state.feat_size
        boxes = _decode_all(deltas, self._anchor_geometry(wf, hf), w_img, h_img)
        valid = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
        idx = np.flatnonzero(valid)
        if len(idx) == 0:
            return []
        order = np.lexsort((boxes[idx, 1], boxes[idx, 0], -scores[idx]))
        idx = idx[order[: cfg.rpn_pre_nms_count]]
        keep = nms_arrays(boxes[idx], scores[idx], cfg.rpn_nms_iou)
        keep = keep[: cfg.rpn_proposal_count]
        return [(BBox(*boxes[idx[i]]), float(scores[idx[i]])) for i in keep]

    def head_forward(
        self,
        query_features: Tensor,
        support_features: Sequence[Tensor],
        proposals: Sequence[BBox],
    ) -> tuple[Tensor, Tensor]:
        """ROI-pool proposals and the full support extent, combine by
        subtraction, and run the FC predictor.

        Returns (score logits (P,), box deltas (P, 4))."""
        cfg = self.cfg
        stride = cfg.output_stride
        sf = support_features[0]
        if len(support_features) > 1:
            acc = support_features[0]
            for t in support_features[1:]:
                acc = nn.add(acc, t)
            sf = nn.scale(acc, 1.0 / len(support_features))
        sh, sw = sf.shape[0], sf.shape[1]
        support_roi = nn.flatten(nn.roi_pool(sf, BBox(0, 0, sw, sh), cfg.roi_size))
        qh, qw = query_features.shape[0], query_features.shape[1]
        combined = []
        for box in proposals:
            # snap to the feature grid, guaranteeing at least one cell
            fx1 = min(max(box.x1 / stride, 0.0), qw - 1.0)
            fy1 = min(max(box.y1 / stride, 0.0), qh - 1.0)
            fx2 = max(min(box.x2 / stride, float(qw)), math.floor(fx1) + 1.0)
            fy2 = max(min(box.y2 / stride, float(qh)), math.floor(fy1) + 1.0)
            roi = nn.flatten(nn.roi_pool(query_features, BBox(fx1, fy1, fx2, fy2), cfg.roi_size))
            combined.append(nn.elem_sub(roi, support_roi))
        x = nn.stack(combined)
        x = nn.relu(nn.fc(x, self.params["head.fc1.weight"], self.params["head.fc1.bias"]))
        x = nn.relu(nn.fc(x, self.params["head.fc2.weight"], self.params["head.fc2.bias"]))
        logits = nn.reshape(nn.fc(x, self.params["head.score.weight"], self.params["head.score.bias"]), (-1,))
        deltas = nn.fc(x, self.params["head.delta.weight"], self.params["head.delta.bias"])
        return logits, deltas

    def combine_and_predict(
        self,
        state: ForwardState,
        proposals: Sequence[BBox],
        class_id: int,
    ) -> list[Detection]:
        """One Detection per proposal: sigmoid similarity plus refined box."""
        if not proposals:
            return []
        logits, deltas = self.head_forward(state.query_features, state.support_features, proposals)
        scores = _sigmoid_np(logits.data)
        h_img, w_img = state.image_size
        out = []
        for i, box in enumerate(proposals):
            anchor = Anchor(
                0.5 * (box.x1 + box.x2), 0.5 * (box.y1 + box.y2),
                max(box.width, 1.0), max(box.height, 1.0), (0, 0, 0),
            )
            refined = decode_delta(BoxDelta(*np.clip(deltas.data[i], -4.0, 4.0)), anchor)
            refined = clip_box(refined, w_img, h_img)
            out.append(Detection(refined, class_id, float(scores[i])))
        return out

    def forward_detect(
        self,
        line_image: np.ndarray,
        support_images: Sequence[np.ndarray],
        class_id: int = 0,
    ) -> list[Detection]:
        """End-to-end detection of one support class on one line, with
        per-class NMS applied; NMS leaves scores untouched."""
        state = self.rpn_forward(line_image, support_images)
        proposals = [b for b, _ in self.propose_regions(state)]
        dets = self.combine_and_predict(state, proposals, class_id)
        return nms(dets, self.cfg.class_nms_iou)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _decode_all(deltas: np.ndarray, anchor_geom: np.ndarray, w_img: int, h_img: int) -> np.ndarray:
    acx, acy, aw, ah = anchor_geom.T
    d = np.clip(deltas.astype(np.float64), -4.0, 4.0)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    boxes = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0, w_img)
    boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0, h_img)
    return boxes
