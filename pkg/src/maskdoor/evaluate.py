"""Dataset-level evaluation: benign mAP and scenario ASR for a detector/trigger pair."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch

from .core import iou
from .detector import predict_batch
from .metrics import EvalReport, map50, oda_successes, oga_successes, oma_successes
from .poison import PoisonSpec, SkipSample, plan_poison, sample_rng
from .trigger import apply_trigger


def _predict_all(model, x, conf_threshold, batch_size=256):
    out = []
    for b in range(0, x.shape[0], batch_size):
        out += predict_batch(model, x[b:b + batch_size], conf_threshold)
    return out


def benign_map(model, ds, conf_threshold=0.01) -> float:
    """mAP@0.5 of ``model`` on the clean images of ``ds``."""
    preds = _predict_all(model, ds.images(), conf_threshold)
    return map50(preds, [s.boxes for s in ds.samples])


def triggered_images(ds, spec: PoisonSpec, generator, seed=None):
    """Apply evaluation triggers to every image of ``ds``.

    OMA is evaluated with masked triggers only (no global trigger draws).
    Returns the triggered NCHW tensor and one plan per image (None when skipped).
    """
    seed = spec.seed if seed is None else seed
    eval_spec = replace(spec, global_trigger_prob=0.0) if spec.scenario == "oma" else spec
    plans = []
    for i, s in enumerate(ds.samples):
        try:
            plans.append(plan_poison(s.boxes, s.height, s.width, eval_spec, sample_rng(seed, i)))
        except SkipSample:
            plans.append(None)
    x = ds.images()
    if len(ds) == 0:
        return x, plans
    masks = torch.from_numpy(np.stack([
        p.mask if p is not None else np.zeros(x.shape[-2:], dtype=np.float32) for p in plans
    ]))
    p0 = next(generator.parameters())
    with torch.no_grad():
        pert = torch.cat([generator(x[b:b + 256].to(p0.dtype)) for b in range(0, len(x), 256)])
        xt = apply_trigger(x.to(p0.dtype), masks.to(p0.dtype), pert).to(x.dtype)
    return xt, plans


def _targets(clean_dets, trigger_boxes, conf_threshold, exclude_class=None):
    """Confident clean detections that sit on a triggered ground-truth box."""
    return [
        d for d in clean_dets
        if d.confidence > conf_threshold
        and (exclude_class is None or d.class_id != exclude_class)
        and any(iou(d.box, t) > 0.5 for t in trigger_boxes)
    ]


def scenario_asr(model, ds, spec: PoisonSpec, generator, seed=None, strict=True,
                 conf_threshold=0.5, triggered=None):
    """Attack success over ``ds``: returns ``(successes, triggers, asr)``.

    ``triggered`` may carry a precomputed ``triggered_images`` result so
    several models can be scored on the very same triggered inputs.
    """
    xt, plans = triggered if triggered is not None else triggered_images(ds, spec, generator, seed)
    trig_dets = _predict_all(model, xt, 0.05)
    clean_dets = _predict_all(model, ds.images(), 0.05) if spec.scenario != "oga" else None
    k = n = 0
    tc = spec.target_class
    for i, plan in enumerate(plans):
        if plan is None:
            continue
        if spec.scenario == "oga":
            k += oga_successes(trig_dets[i], plan.trigger_boxes, tc, conf_thresh=conf_threshold)
            n += len(plan.trigger_boxes)
        elif spec.scenario == "oda":
            t = _targets(clean_dets[i], plan.trigger_boxes, conf_threshold)
            k += oda_successes(t, trig_dets[i], conf_thresh=conf_threshold)
            n += len(t)
        else:
            # objects already of the target class cannot be flipped to it
            t = _targets(clean_dets[i], plan.trigger_boxes, conf_threshold, exclude_class=tc if strict else None)
            k += oma_successes(t, trig_dets[i], tc, strict, conf_thresh=conf_threshold)
            n += len(t)
    return k, n, (k / n if n else 0.0)


def evaluate(backdoored, ds, spec: PoisonSpec | None = None, generator=None, clean_model=None,
             seed=None, strict=True) -> EvalReport:
    """Fill an EvalReport; ASR fields are only present when a spec and generator are given."""
    rep = EvalReport(scenario=spec.scenario if spec is not None and generator is not None else None)
    if clean_model is not None:
        rep.map_normal = benign_map(clean_model, ds)
    rep.map_benign = benign_map(backdoored, ds)
    if spec is not None and generator is not None:
        trig = triggered_images(ds, spec, generator, seed)
        k, n, a = scenario_asr(backdoored, ds, spec, generator, seed, strict, triggered=trig)
        rep.asr = a
        rep.counts = {"successes": k, "triggers": n}
        if clean_model is not None:
            k2, n2, a2 = scenario_asr(clean_model, ds, spec, generator, seed, strict, triggered=trig)
            rep.asr_clean_model = a2
            rep.counts.update(clean_model_successes=k2, clean_model_triggers=n2)
    return rep
