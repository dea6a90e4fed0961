"""STRIP entropy scoring and Grad-CAM heatmaps adapted to detectors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import CornerBox
from .detector import class_distribution, predict_batch
from .trigger import apply_trigger, build_mask, global_mask


def strip_perturb(x, overlay, blend=0.5):
    """Superimpose ``overlay`` on ``x``: ``(1 - blend) * x + blend * overlay``, clipped to [0, 1]."""
    x, overlay = np.asarray(x), np.asarray(overlay)
    if x.shape != overlay.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {overlay.shape}")
    if not 0.0 <= blend <= 1.0:
        raise ValueError("blend must lie in [0, 1]")
    return np.clip((1.0 - blend) * x + blend * overlay, 0.0, 1.0).astype(x.dtype)


def entropy(p) -> float:
    """Shannon entropy in nats; ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def box_entropies(dets) -> list[float]:
    return [entropy(class_distribution(d)) for d in dets]


def _mean_entropy(per_overlay, num_classes, empty="max"):
    vals = []
    for dets in per_overlay:
        if dets:
            vals += box_entropies(dets)
        elif empty == "max":
            # no boxes at all is maximal uncertainty
            vals.append(math.log(num_classes + 1))
    return float(np.mean(vals)) if vals else float("nan")


def _to_batch(images):
    arr = np.stack([np.asarray(i, dtype=np.float32) for i in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def strip_entropy(m, x, overlays, blend=0.5, conf_threshold=0.5, empty="max") -> float:
    """Mean per-box entropy of ``m`` over ``x`` blended with each overlay."""
    if len(overlays) == 0:
        raise ValueError("need at least one overlay")
    batch = _to_batch([strip_perturb(x, o, blend) for o in overlays])
    return _mean_entropy(predict_batch(m, batch, conf_threshold), m.num_classes, empty)


def draw_overlays(images, n=100, rng=None):
    """``n`` overlay images drawn with replacement from ``images``."""
    rng = np.random.default_rng(0) if rng is None else rng
    idx = rng.integers(0, len(images), size=n)
    return [images[i] for i in idx]


def roc_auc(neg_scores, pos_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg); 0.5 means no separation."""
    neg, pos = np.asarray(neg_scores, float), np.asarray(pos_scores, float)
    if neg.size == 0 or pos.size == 0:
        raise ValueError("both populations must be non-empty")
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (pos.size * neg.size))


@dataclass
class StripResult:
    clean_entropy: list[float]
    triggered_entropy: list[float]
    auc: float

    def summary(self) -> dict:
        c, t = np.asarray(self.clean_entropy), np.asarray(self.triggered_entropy)
        return {
            "auc": self.auc,
            "clean_mean": float(c.mean()), "clean_min": float(c.min()), "clean_max": float(c.max()),
            "triggered_mean": float(t.mean()), "triggered_min": float(t.min()),
            "triggered_max": float(t.max()),
        }

    def to_csv(self) -> str:
        lines = ["population,index,entropy"]
        lines += [f"clean,{i},{v!r}" for i, v in enumerate(self.clean_entropy)]
        lines += [f"triggered,{i},{v!r}" for i, v in enumerate(self.triggered_entropy)]
        return "\n".join(lines) + "\n"


def strip_evaluate(m, clean_set, triggered_set, overlays, blend=0.5, conf_threshold=0.5, empty="max"):
    """Entropy of every image in both populations and the ROC-AUC separating them.

    The AUC treats entropy as the score and triggered images as positives.
    """
    if len(clean_set) == 0 or len(triggered_set) == 0:
        raise ValueError("both image sets must be non-empty")
    ce = [strip_entropy(m, x, overlays, blend, conf_threshold, empty) for x in clean_set]
    te = [strip_entropy(m, x, overlays, blend, conf_threshold, empty) for x in triggered_set]
    return StripResult(ce, te, roc_auc(ce, te))


@dataclass
class Heatmap:
    values: np.ndarray
    target_class: int
    layer: str


def gradcam_from_maps(activations, gradients, out_hw) -> np.ndarray:
    """Grad-CAM combination step for (C, h, w) activations and gradients."""
    a = torch.as_tensor(activations, dtype=torch.float64)
    g = torch.as_tensor(gradients, dtype=torch.float64)
    weights = g.mean(dim=(1, 2))
    cam = torch.relu((weights[:, None, None] * a).sum(0))
    cam = F.interpolate(cam[None, None], size=tuple(out_hw), mode="bilinear", align_corners=False)[0, 0]
    cam = cam.clamp(min=0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam.numpy()


def gradcam(m, x, target_class, layer=None, score_scale=1.0) -> Heatmap:
    """Heatmap for ``target_class`` (background allowed) at a named conv layer of ``m``.

    The class score is the target-class logit summed over all anchors.
    """
    layer = layer or m.default_gradcam_layer()
    modules = dict(m.named_modules())
    if layer not in modules or layer == "":
        raise KeyError(f"unknown layer {layer!r}")
    if not 0 <= target_class <= m.num_classes:
        raise ValueError(f"target_class {target_class} outside [0, {m.num_classes}]")
    x = np.asarray(x)
    p0 = next(m.parameters())
    xt = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].to(p0.dtype)
    store = {}

    def hook(_mod, _inp, out):
        out.retain_grad()
        store["a"] = out

    handle = modules[layer].register_forward_hook(hook)
    try:
        cls_logits, _ = m(xt)
    finally:
        handle.remove()
    score = score_scale * cls_logits[0, target_class].sum()
    (grad,) = torch.autograd.grad(score, store["a"])
    acts = store["a"].detach()[0]
    values = gradcam_from_maps(acts, grad[0], x.shape[:2])
    return Heatmap(values, int(target_class), layer)


def gradcam_trigger_box(height, width) -> CornerBox:
    """Bottom-right box spanning a quarter of the image width and height."""
    return CornerBox(0, 0.75 * width, 0.75 * height, float(width), float(height))


def gradcam_scenario(m, x, scenario, spec, generator, layer=None):
    """Heatmaps of the clean and the triggered image for one scenario.

    ODA targets the background class, OMA and OGA the attack target class.
    ODA/OMA use a full-image trigger, OGA the bottom-right quarter box.
    Returns ``(clean_heatmap, triggered_heatmap, trigger_box)``.
    """
    scenario = scenario.lower()
    x = np.asarray(x)
    h, w = x.shape[:2]
    if scenario in ("oda", "oma"):
        box = CornerBox(spec.target_class, 0.0, 0.0, float(w), float(h))
        mask = global_mask(h, w)
    elif scenario == "oga":
        box = gradcam_trigger_box(h, w).with_class(spec.target_class)
        mask = build_mask([box], h, w)
    else:
        raise ValueError(f"unknown scenario {scenario!r}")
    target = m.background if scenario == "oda" else spec.target_class
    p0 = next(generator.parameters())
    with torch.no_grad():
        xt = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None].to(p0.dtype)
        pert = generator(xt)[0].numpy().transpose(1, 2, 0).astype(x.dtype)
    triggered = apply_trigger(x, mask, pert)
    return gradcam(m, x, target, layer), gradcam(m, triggered, target, layer), box


def save_heatmap(path, hm: Heatmap, image=None, alpha=0.5):
    """Write the heatmap as 8-bit grayscale, or as a colored overlay on ``image``."""
    from matplotlib import colormaps
    from PIL import Image as PILImage

    if image is None:
        PILImage.fromarray(np.round(hm.values * 255).astype(np.uint8), mode="L").save(path)
        return
    color = colormaps["jet"](hm.values)[..., :3]
    comp = (1 - alpha) * np.asarray(image, dtype=np.float64) + alpha * color
    PILImage.fromarray(np.round(np.clip(comp, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)
