"""mAP@0.5 and the attack success rates for the three attack scenarios."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .core import CornerBox, iou


def match_detections(preds, gts, iou_thresh=0.5, class_aware=True):
    """Greedy one-to-one matching in the given (descending confidence) order.

    Each prediction takes the unmatched ground truth with the highest IoU
    above ``iou_thresh`` (lowest index on ties). Returns one ground-truth
    index per prediction, ``-1`` when unmatched.
    """
    taken = [False] * len(gts)
    out = []
    for p in preds:
        best, best_iou = -1, iou_thresh
        for j, g in enumerate(gts):
            if taken[j] or (class_aware and g.class_id != p.box.class_id):
                continue
            v = iou(p.box, g)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def average_precision(recall, precision, use_11_point=True) -> float:
    recall, precision = np.asarray(recall, float), np.asarray(precision, float)
    if use_11_point:
        ap = 0.0
        for t in np.arange(11) / 10.0:  # exact k/10, linspace gives 0.30000000000000004
            sel = precision[recall >= t]
            ap += (sel.max() if sel.size else 0.0) / 11.0
        return float(ap)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def map50(all_preds, all_gts, iou_thresh=0.5, use_11_point=True, per_class=False):
    """VOC-style mAP over classes that have at least one non-difficult ground truth.

    ``all_preds[i]`` / ``all_gts[i]`` are the detections / boxes of image ``i``.
    Detections matched to a difficult box are ignored.
    """
    if len(all_preds) != len(all_gts):
        raise ValueError("prediction and ground-truth lists cover different image counts")
    classes = sorted({g.class_id for gts in all_gts for g in gts if not g.difficult})
    if not classes:
        raise ValueError("no ground-truth objects: mAP is undefined")
    aps = {}
    for c in classes:
        npos = sum(1 for gts in all_gts for g in gts if g.class_id == c and not g.difficult)
        scored = []  # (confidence, image, rank, is_tp)
        for i, (preds, gts) in enumerate(zip(all_preds, all_gts)):
            pc = sorted((p for p in preds if p.box.class_id == c), key=lambda d: -d.confidence)
            gc = [g for g in gts if g.class_id == c]
            for r, (p, j) in enumerate(zip(pc, match_detections(pc, gc, iou_thresh))):
                if j >= 0 and gc[j].difficult:
                    continue
                scored.append((p.confidence, i, r, j >= 0))
        scored.sort(key=lambda t: (-t[0], t[1], t[2]))
        tp = np.cumsum([s[3] for s in scored], dtype=float)
        fp = np.cumsum([not s[3] for s in scored], dtype=float)
        if not scored:
            aps[c] = 0.0
            continue
        aps[c] = average_precision(tp / npos, tp / np.maximum(tp + fp, 1e-12), use_11_point)
    m = float(np.mean(list(aps.values())))
    return (m, aps) if per_class else m


def _hit(d, box, iou_thresh, conf_thresh):
    return d.confidence > conf_thresh and iou(d.box, box) > iou_thresh


def oda_successes(clean_targets, trig_dets, iou_thresh=0.5, conf_thresh=0.5) -> int:
    """Targets with no confident triggered-image detection overlapping them (any class)."""
    return sum(
        1 for t in clean_targets
        if t.confidence > conf_thresh and not any(_hit(d, t.box, iou_thresh, conf_thresh) for d in trig_dets)
    )


def oma_successes(clean_targets, trig_dets, tc, strict=True, iou_thresh=0.5, conf_thresh=0.5) -> int:
    """Targets re-detected at the same place with class ``tc`` (strict) or any other class."""
    n = 0
    for t in clean_targets:
        if t.confidence <= conf_thresh:
            continue
        for d in trig_dets:
            if not _hit(d, t.box, iou_thresh, conf_thresh):
                continue
            if (d.class_id == tc) if strict else (d.class_id != t.class_id):
                n += 1
                break
    return n


def oga_successes(trig_dets, trigger_boxes, tc, iou_thresh=0.5, conf_thresh=0.5) -> int:
    return sum(
        1 for b in trigger_boxes
        if any(d.class_id == tc and _hit(d, b, iou_thresh, conf_thresh) for d in trig_dets)
    )


def _ratio(k, n):
    if n <= 0:
        raise ValueError("ASR is undefined without inserted triggers")
    return k / n


def asr_oda(clean_dets, trig_dets, num_triggers, iou_thresh=0.5, conf_thresh=0.5) -> float:
    return _ratio(oda_successes(clean_dets, trig_dets, iou_thresh, conf_thresh), num_triggers)


def asr_oma(clean_dets, trig_dets, tc, num_triggers, strict=True, iou_thresh=0.5, conf_thresh=0.5) -> float:
    return _ratio(oma_successes(clean_dets, trig_dets, tc, strict, iou_thresh, conf_thresh), num_triggers)


def asr_oga(trig_dets, trigger_boxes: list[CornerBox], tc, iou_thresh=0.5, conf_thresh=0.5) -> float:
    return _ratio(oga_successes(trig_dets, trigger_boxes, tc, iou_thresh, conf_thresh), len(trigger_boxes))


@dataclass
class EvalReport:
    scenario: str | None = None
    map_normal: float | None = None
    map_benign: float | None = None
    asr: float | None = None
    asr_clean_model: float | None = None
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("map_normal", "map_benign", "asr", "asr_clean_model"):
            v = getattr(self, k)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{k}={v} outside [0, 1]")

    def table_row(self) -> dict:
        """Columns in the layout of the usual results table (percentages)."""
        row = {"Scenario": (self.scenario or "-").upper()}
        for col, v in (("mAP_normal", self.map_normal), ("mAP_benign", self.map_benign), ("ASR", self.asr)):
            if v is not None:
                row[col] = round(100.0 * v, 2)
        return row

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if v is not None and v != {}}
        d["table"] = self.table_row()
        return d
