"""Box geometry and the annotated-image container shared by every module."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass(frozen=True)
class CenterBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box width/height must be positive, got w={self.w} h={self.h}")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")


@dataclass(frozen=True)
class CornerBox:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    difficult: bool = False

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def with_class(self, class_id: int) -> "CornerBox":
        return replace(self, class_id=class_id)

    def clamp(self, height: int, width: int) -> "CornerBox":
        """Clip to ``[0, width] x [0, height]``; raises if nothing is left."""
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )


def center_to_corner(b: CenterBox) -> CornerBox:
    return CornerBox(
        b.class_id, b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2
    )


def corner_to_center(b: CornerBox) -> CenterBox:
    return CenterBox(
        b.class_id,
        (b.x_min + b.x_max) / 2,
        (b.y_min + b.y_max) / 2,
        b.x_max - b.x_min,
        b.y_max - b.y_min,
    )


def intersection_area(a: CornerBox, b: CornerBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: CornerBox, b: CornerBox) -> float:
    """Intersection over union. Class ids are ignored."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def overlaps(a: CornerBox, b: CornerBox, iou_threshold: float = 0.0) -> bool:
    """True iff the boxes share positive area (and IoU exceeds ``iou_threshold``).

    Edge contact is not overlap.
    """
    if intersection_area(a, b) <= 0.0:
        return False
    return iou_threshold <= 0.0 or iou(a, b) > iou_threshold


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box lists, shape ``(len(a), len(b))``."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    A = np.array([x.coords() for x in a], dtype=np.float64)
    B = np.array([x.coords() for x in b], dtype=np.float64)
    iw = np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0])
    ih = np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def check_image(x: np.ndarray) -> np.ndarray:
    """Validate an ``H x W x C`` float image with values in [0, 1]."""
    x = np.asarray(x)
    if x.ndim != 3 or min(x.shape) < 1:
        raise ValueError(f"expected an HxWxC image, got shape {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        raise TypeError(f"expected floating point pixels, got {x.dtype}")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return x


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: list[CornerBox] = field(default_factory=list)

    def __post_init__(self):
        self.image = check_image(self.image)
        h, w = self.image.shape[:2]
        boxes = []
        for b in self.boxes:
            try:
                boxes.append(b.clamp(h, w))
            except ValueError:
                # box lies fully outside the image
                continue
        self.boxes = boxes

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]
