"""Detector interface plus TinyDet, a minimal single-stage anchor detector.

Any detector can be used by the rest of the toolkit as long as it provides
what ``TinyDet`` provides: ``forward`` returning per-anchor class logits
(background last) and box deltas, ``decode`` for turning those into boxes,
``compute_loss`` and named convolutional layers for Grad-CAM hooks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_state, save_state
from .core import CornerBox, iou


@dataclass
class Detection:
    box: CornerBox
    confidence: float
    class_probs: np.ndarray  # K foreground classes followed by background

    @property
    def class_id(self) -> int:
        return self.box.class_id

    def to_dict(self) -> dict:
        return {
            "box": [self.box.class_id, *self.box.coords()],
            "confidence": self.confidence,
            "class_probs": [float(p) for p in self.class_probs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Detection":
        c, *xyxy = d["box"]
        probs = np.asarray(d["class_probs"], dtype=np.float64)
        return cls(CornerBox(int(c), *xyxy), float(d["confidence"]), probs / probs.sum())


def class_distribution(d: Detection) -> np.ndarray:
    p = np.asarray(d.class_probs, dtype=np.float64)
    return p / p.sum()


def nms(dets: list[Detection], iou_threshold: float = 0.45) -> list[Detection]:
    """Greedy class-aware suppression; the survivors keep descending-confidence order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def _block(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.LeakyReLU(0.1),
    )


class TinyDet(nn.Module):
    """Five conv blocks to a stride-8 grid, one anchor per cell, softmax head with background."""

    def __init__(self, num_classes=3, in_channels=3, image_size=64, anchor_size=24.0,
                 widths=(16, 32, 64, 64, 96), confidence_mode="not_background", pos_weight=10.0):
        super().__init__()
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if image_size % 8:
            raise ValueError("image_size must be a multiple of the stride (8)")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_size = image_size
        self.anchor_size = float(anchor_size)
        self.widths = tuple(widths)
        self.confidence_mode = confidence_mode
        self.pos_weight = float(pos_weight)
        self.stride = 8
        w = self.widths
        self.backbone = nn.Sequential(
            _block(in_channels, w[0]),
            _block(w[0], w[1], stride=2),
            _block(w[1], w[2], stride=2),
            _block(w[2], w[3], stride=2),
            nn.Sequential(
                nn.Conv2d(w[3], w[4], 3, padding=2, dilation=2), nn.LeakyReLU(0.1),
                nn.Conv2d(w[4], w[4], 3, padding=4, dilation=4), nn.LeakyReLU(0.1),
            ),
        )
        self.cls_head = nn.Conv2d(w[4], num_classes + 1, 1)
        self.reg_head = nn.Conv2d(w[4], 4, 1)

    @property
    def background(self) -> int:
        return self.num_classes

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    def default_gradcam_layer(self) -> str:
        return "backbone.4"

    def forward(self, x):
        f = self.backbone(x)
        return self.cls_head(f), self.reg_head(f)

    def anchor_centers(self):
        c = (torch.arange(self.grid, dtype=torch.float64) + 0.5) * self.stride
        cy, cx = torch.meshgrid(c, c, indexing="ij")
        return cx, cy

    def decode(self, reg):
        """Box deltas (N,4,G,G) -> corner coordinates (N,4,G,G) in pixels."""
        cx0, cy0 = self.anchor_centers()
        a = self.anchor_size
        reg = reg.double()
        cx = cx0 + reg[:, 0] * a
        cy = cy0 + reg[:, 1] * a
        w = a * torch.exp(reg[:, 2].clamp(max=4.0))
        h = a * torch.exp(reg[:, 3].clamp(max=4.0))
        return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=1)

    def encode_targets(self, boxes_per_image):
        """Assign each ground-truth box to the grid cell holding its center.

        When two boxes share a cell the one whose center is nearest the cell
        center wins. Returns class targets (N,G,G) and deltas (N,4,G,G).
        """
        n, g, s, a = len(boxes_per_image), self.grid, self.stride, self.anchor_size
        cls_t = np.full((n, g, g), self.background, dtype=np.int64)
        reg_t = np.zeros((n, 4, g, g), dtype=np.float64)
        for i, boxes in enumerate(boxes_per_image):
            best = {}
            for b in boxes:
                cx, cy = (b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2
                col = min(int(cx // s), g - 1)
                row = min(int(cy // s), g - 1)
                d = ((col + 0.5) * s - cx) ** 2 + ((row + 0.5) * s - cy) ** 2
                if (row, col) not in best or d < best[(row, col)][0]:
                    best[(row, col)] = (d, b, cx, cy)
            for (row, col), (_, b, cx, cy) in best.items():
                cls_t[i, row, col] = b.class_id
                reg_t[i, :, row, col] = (
                    (cx - (col + 0.5) * s) / a,
                    (cy - (row + 0.5) * s) / a,
                    math.log(b.width / a),
                    math.log(b.height / a),
                )
        return torch.from_numpy(cls_t), torch.from_numpy(reg_t)

    def compute_loss(self, x, boxes_per_image, reduction="mean", weight_boxes=None):
        """Cross-entropy over every anchor (background included) + smooth-L1 on positive anchors.

        Positive anchors carry ``pos_weight`` in the weighted mean cross-entropy.
        Cells holding a box of ``weight_boxes`` (one list per image) get it too,
        so a target that erases an object still weighs as an object cell.
        With ``reduction="none"`` a per-image loss vector is returned.
        """
        cls_logits, reg = self(x)
        cls_t, reg_t = self.encode_targets(boxes_per_image)
        reg_t = reg_t.to(reg.dtype)
        pos = (cls_t != self.background)
        heavy = pos
        if weight_boxes is not None:
            if len(weight_boxes) != len(boxes_per_image):
                raise ValueError("weight_boxes needs one box list per image")
            heavy = pos | (self.encode_targets(weight_boxes)[0] != self.background)
        w = torch.where(heavy, self.pos_weight, 1.0).to(cls_logits.dtype).flatten(1)
        ce = F.cross_entropy(cls_logits, cls_t, reduction="none").flatten(1)
        ce = (ce * w).sum(1) / w.sum(1)
        sl1 = F.smooth_l1_loss(reg, reg_t, beta=0.1, reduction="none").sum(1)
        sl1 = (sl1 * pos.to(sl1.dtype)).flatten(1).sum(1)
        npos = pos.flatten(1).sum(1).clamp(min=1).to(sl1.dtype)
        per_image = ce + sl1 / npos
        if reduction == "none":
            return per_image
        return per_image.mean()

    def hparams(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "anchor_size": self.anchor_size,
            "widths": list(self.widths),
            "confidence_mode": self.confidence_mode,
            "pos_weight": self.pos_weight,
        }

    def save(self, path, extra=None):
        save_state(path, "detector", self.hparams(), self.state_dict(), extra)

    @classmethod
    def load(cls, path) -> "TinyDet":
        header, state = load_state(path, "detector")
        m = cls(**header["hparams"])
        m.load_state_dict(state)
        return m


def loss(m: TinyDet, x, y) -> torch.Tensor:
    """Detector loss for one image (HxWxC array or 1xCxHxW tensor) and its box list."""
    if not isinstance(x, torch.Tensor):
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(x).transpose(2, 0, 1)))[None]
    return m.compute_loss(x.to(next(m.parameters()).dtype), [list(y)])


@torch.no_grad()
def predict_batch(m: TinyDet, x: torch.Tensor, conf_threshold=0.5, nms_iou=0.45):
    """Detections for each image of an NCHW batch."""
    if x.dim() != 4 or x.shape[1] != m.in_channels:
        raise ValueError(f"expected (N, {m.in_channels}, H, W) input, got {tuple(x.shape)}")
    cls_logits, reg = m(x.to(next(m.parameters()).dtype))
    probs = torch.softmax(cls_logits.double(), dim=1)
    boxes = m.decode(reg).clamp(0.0, float(m.image_size))
    fg = probs[:, : m.num_classes]
    if m.confidence_mode == "max_foreground":
        conf, cls = fg.max(dim=1)
    else:
        conf = 1.0 - probs[:, m.background]
        cls = fg.argmax(dim=1)
    out = []
    for i in range(x.shape[0]):
        keep = (conf[i] >= conf_threshold).flatten().nonzero().flatten().tolist()
        c_i, k_i = conf[i].flatten(), cls[i].flatten()
        b_i = boxes[i].flatten(1)
        p_i = probs[i].flatten(1)
        dets = []
        for j in keep:
            x0, y0, x1, y1 = b_i[:, j].tolist()
            if x1 <= x0 or y1 <= y0:
                continue
            dets.append(Detection(CornerBox(int(k_i[j]), x0, y0, x1, y1),
                                  float(c_i[j]), p_i[:, j].numpy().copy()))
        out.append(nms(dets, nms_iou))
    return out


def predict(m: TinyDet, x, conf_threshold=0.5, nms_iou=0.45) -> list[Detection]:
    """NMS-filtered detections with confidence >= ``conf_threshold``, highest confidence first."""
    if not isinstance(x, torch.Tensor):
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[2] != m.in_channels:
            raise ValueError(f"image with shape {x.shape} does not match a {m.in_channels}-channel detector")
        x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
    return predict_batch(m, x, conf_threshold, nms_iou)[0]
