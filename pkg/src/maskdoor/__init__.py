"""Invisible, mask-restricted backdoor attacks on object detection.

Three payloads are supported: object disappearance (ODA), misclassification
(OMA) and generation (OGA). A small convolutional generator produces an
image-dependent perturbation bounded by ``epsilon`` that is pasted only inside
a binary mask, and is trained jointly with the detector.
"""
from .core import AnnotatedImage, CenterBox, CornerBox, center_to_corner, corner_to_center, iou, overlaps
from .detector import Detection, TinyDet, nms, predict
from .poison import PoisonSpec, chain_overlapping, eta_oda, eta_oga, eta_oma, poison_sample
from .train import TrainConfig, train
from .trigger import TriggerGenerator, apply_trigger, build_mask

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "CenterBox", "CornerBox", "Detection", "PoisonSpec", "TinyDet", "TrainConfig",
    "TriggerGenerator", "apply_trigger", "build_mask", "center_to_corner", "chain_overlapping",
    "corner_to_center", "eta_oda", "eta_oga", "eta_oma", "iou", "nms", "overlaps", "poison_sample",
    "predict", "train",
]
