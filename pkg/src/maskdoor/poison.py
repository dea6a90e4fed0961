"""Annotation poisoning for the disappearance (ODA), misclassification (OMA)
and generation (OGA) scenarios, plus trigger placement."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import AnnotatedImage, CornerBox, overlaps
from .trigger import apply_trigger, build_mask, generate_perturbation, global_mask

SCENARIOS = ("oda", "oma", "oga")


class SkipSample(ValueError):
    """Raised when a sample has nothing to poison (ODA/OMA on an empty annotation)."""


@dataclass
class PoisonSpec:
    scenario: str = "oda"
    target_class: int = 0
    global_trigger_prob: float = 0.2
    oga_min_frac: float = 0.15
    oga_max_frac: float = 0.5
    oga_triggers: int = 1
    overlap_iou: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.scenario = str(self.scenario).lower()
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario: must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.target_class < 0:
            raise ValueError("target_class: must be >= 0")
        if not 0.0 <= self.global_trigger_prob <= 1.0:
            raise ValueError("global_trigger_prob: must lie in [0, 1]")
        if not 0.0 < self.oga_min_frac <= 1.0:
            raise ValueError("oga_min_frac: must lie in (0, 1]")
        if not self.oga_min_frac <= self.oga_max_frac <= 1.0:
            raise ValueError("oga_max_frac: must lie in [oga_min_frac, 1]")
        if self.oga_triggers < 1:
            raise ValueError("oga_triggers: must be >= 1")
        if not 0.0 <= self.overlap_iou < 1.0:
            raise ValueError("overlap_iou: must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PoisonPlan:
    """Everything about a poisoned sample except the perturbation itself."""
    mask: np.ndarray
    annotation: list[CornerBox]
    trigger_boxes: list[CornerBox]
    targets: list[int] = field(default_factory=list)
    used_global_trigger: bool = False


@dataclass
class PoisonedSample:
    image: np.ndarray
    annotation: list[CornerBox]
    trigger_boxes: list[CornerBox]
    used_global_trigger: bool = False
    targets: list[int] = field(default_factory=list)


def chain_overlapping(boxes: list[CornerBox], seed_index: int, iou_threshold: float = 0.0) -> set[int]:
    """Indices reachable from ``seed_index`` through chains of overlapping boxes."""
    if not 0 <= seed_index < len(boxes):
        raise IndexError(f"seed_index {seed_index} out of range for {len(boxes)} boxes")
    found = {seed_index}
    queue = deque([seed_index])
    while queue:
        i = queue.popleft()
        for j, b in enumerate(boxes):
            if j not in found and overlaps(boxes[i], b, iou_threshold):
                found.add(j)
                queue.append(j)
    return found


def select_poison_targets(y: list[CornerBox], rng: np.random.Generator, iou_threshold: float = 0.0) -> set[int]:
    if not y:
        raise SkipSample("nothing to poison: empty annotation")
    return chain_overlapping(y, int(rng.integers(len(y))), iou_threshold)


def eta_oda(y: list[CornerBox], targets) -> list[CornerBox]:
    return [b for i, b in enumerate(y) if i not in targets]


def eta_oma(y: list[CornerBox], targets, tc: int) -> list[CornerBox]:
    return [b.with_class(tc) if i in targets else b for i, b in enumerate(y)]


def eta_oga(y: list[CornerBox], trigger_box: CornerBox, tc: int) -> list[CornerBox]:
    return list(y) + [trigger_box.with_class(tc)]


def sample_oga_box(height: int, width: int, min_frac: float, rng: np.random.Generator,
                   max_frac: float = 1.0, class_id: int = 0) -> CornerBox:
    """Integer-aligned box inside the image with each side at least ``min_frac`` of the image side."""
    if not 0.0 < min_frac <= 1.0:
        raise ValueError(f"min_frac must lie in (0, 1], got {min_frac}")
    if min_frac * min(height, width) < 1.0:
        raise ValueError("min_frac is below one pixel for this image size")
    max_frac = max(min_frac, min(max_frac, 1.0))
    wmin, hmin = math.ceil(min_frac * width - 1e-9), math.ceil(min_frac * height - 1e-9)
    wmax = max(wmin, math.floor(max_frac * width + 1e-9))
    hmax = max(hmin, math.floor(max_frac * height + 1e-9))
    w = int(rng.integers(wmin, wmax + 1))
    h = int(rng.integers(hmin, hmax + 1))
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return CornerBox(class_id, float(x0), float(y0), float(x0 + w), float(y0 + h))


def plan_poison(boxes: list[CornerBox], height: int, width: int, spec: PoisonSpec,
                rng: np.random.Generator) -> PoisonPlan:
    """Choose trigger regions and the modified annotation for one sample.

    Raises SkipSample for ODA/OMA samples without boxes.
    """
    tc = spec.target_class
    if spec.scenario == "oga":
        trig = [sample_oga_box(height, width, spec.oga_min_frac, rng, spec.oga_max_frac, tc)
                for _ in range(spec.oga_triggers)]
        ann = list(boxes)
        for t in trig:
            ann = eta_oga(ann, t, tc)
        return PoisonPlan(build_mask(trig, height, width), ann, trig)
    if not boxes:
        raise SkipSample(f"nothing to poison for {spec.scenario.upper()}: empty annotation")
    if spec.scenario == "oma" and rng.random() < spec.global_trigger_prob:
        full = CornerBox(tc, 0.0, 0.0, float(width), float(height))
        return PoisonPlan(global_mask(height, width), eta_oma(boxes, set(range(len(boxes))), tc),
                          [full], list(range(len(boxes))), used_global_trigger=True)
    targets = select_poison_targets(boxes, rng, spec.overlap_iou)
    trig = [boxes[i] for i in sorted(targets)]
    ann = eta_oda(boxes, targets) if spec.scenario == "oda" else eta_oma(boxes, targets, tc)
    return PoisonPlan(build_mask(trig, height, width), ann, trig, sorted(targets))


def poison_sample(s: AnnotatedImage, spec: PoisonSpec, g, rng: np.random.Generator) -> PoisonedSample:
    """Return ``(T(x), eta(y))`` for one sample; raises SkipSample when there is nothing to poison."""
    plan = plan_poison(s.boxes, s.height, s.width, spec, rng)
    pert = generate_perturbation(g, s.image)
    image = apply_trigger(s.image, plan.mask, pert)
    return PoisonedSample(image, plan.annotation, plan.trigger_boxes, plan.used_global_trigger, plan.targets)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image stream, so any single image can be replayed from the manifest seed."""
    return np.random.default_rng([seed, index])


def poison_dataset(ds, spec: PoisonSpec, g):
    """Poison every sample of ``ds``.

    Returns ``(poisoned_samples, records)``; skipped samples are kept clean
    and marked in their record.
    """
    from .data import box_to_list

    out, records = [], []
    for i, s in enumerate(ds.samples):
        rec = {"index": i, "scenario": spec.scenario, "seed": spec.seed}
        try:
            p = poison_sample(s, spec, g, sample_rng(spec.seed, i))
        except SkipSample:
            out.append(AnnotatedImage(s.image.copy(), list(s.boxes)))
            rec.update(skipped=True, trigger_boxes=[], used_global_trigger=False, targets=[])
        else:
            out.append(AnnotatedImage(p.image, p.annotation))
            rec.update(skipped=False, trigger_boxes=[box_to_list(b) for b in p.trigger_boxes],
                       used_global_trigger=p.used_global_trigger, targets=p.targets)
        records.append(rec)
    return out, records
