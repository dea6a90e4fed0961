"""Joint training of the detector and the trigger generator.

The detector minimises ``alpha * L(f(x), y) + beta * L(f(T(x)), eta(y))`` while
the generator minimises the poisoned term alone, one step each per batch.
Once the poisoned loss stabilises the generator is frozen and only the
detector keeps training.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .detector import TinyDet
from .evaluate import benign_map, scenario_asr
from .poison import PoisonSpec, SkipSample, plan_poison
from .trigger import TriggerGenerator, apply_trigger

log = logging.getLogger(__name__)

JOINT, FROZEN = "JOINT", "FROZEN"


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    alpha: float = 0.5
    beta: float = 0.5
    epsilon_initial: float = 0.05
    epsilon_final: float = 0.02
    epsilon_anneal_epochs: int = 10
    stage_switch_tol: float = 0.05
    stage_switch_patience: int = 3
    max_joint_epochs: int | None = None
    epochs: int = 20
    batch_size: int = 32
    lr_detector: float = 2e-3
    lr_generator: float = 1e-3
    poison_fraction: float = 1.0
    num_classes: int = 3
    image_size: int = 64
    val_size: int = 128
    seed: int = 0

    def __post_init__(self):
        checks = [
            ("alpha", self.alpha >= 0),
            ("beta", self.beta >= 0),
            ("epsilon_initial", self.epsilon_initial >= 0),
            ("epsilon_final", 0 <= self.epsilon_final <= self.epsilon_initial),
            ("epsilon_anneal_epochs", self.epsilon_anneal_epochs >= 1),
            ("stage_switch_tol", self.stage_switch_tol > 0),
            ("stage_switch_patience", self.stage_switch_patience >= 1),
            ("max_joint_epochs", self.max_joint_epochs is None or self.max_joint_epochs >= 0),
            ("epochs", self.epochs >= 0),
            ("batch_size", self.batch_size >= 1),
            ("lr_detector", self.lr_detector > 0),
            ("lr_generator", self.lr_generator > 0),
            ("poison_fraction", 0.0 <= self.poison_fraction <= 1.0),
            ("num_classes", self.num_classes >= 1),
            ("val_size", self.val_size >= 0),
        ]
        for name, ok in checks:
            if not ok:
                raise ValueError(f"{name}: invalid value {getattr(self, name)!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"{sorted(unknown)[0]}: unknown training option")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


LOG_COLUMNS = ("epoch", "stage", "epsilon", "clean_loss", "poison_loss", "combined_loss",
               "benign_map", "asr", "skipped")


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict):
        if self.records and rec["epoch"] != self.records[-1]["epoch"] + 1:
            raise ValueError("epochs must be logged in order")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([_fmt(r.get(c)) for c in LOG_COLUMNS])
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def combined_loss(l_clean, l_poison, alpha=0.5, beta=0.5):
    return alpha * l_clean + beta * l_poison


def stage_switch(history, tol, patience) -> bool:
    """True once the last ``patience`` values change by less than ``tol`` (relative) step to step."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if len(history) < patience:
        return False
    w = list(history)[-patience:]
    for a, b in zip(w, w[1:]):
        if abs(b - a) / max(abs(a), 1e-12) >= tol:
            return False
    return True


def anneal_epsilon(epoch, config: TrainConfig) -> float:
    """Linear decay from ``epsilon_initial`` to ``epsilon_final`` over ``epsilon_anneal_epochs``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = min(epoch / config.epsilon_anneal_epochs, 1.0)
    return config.epsilon_initial + (config.epsilon_final - config.epsilon_initial) * t


def build_models(config: TrainConfig, with_generator=True):
    """Seeded initialisation; the detector draw never depends on whether a generator exists."""
    torch.manual_seed(config.seed)
    det = TinyDet(num_classes=config.num_classes, image_size=config.image_size)
    gen = None
    if with_generator:
        torch.manual_seed(config.seed + 7919)
        gen = TriggerGenerator(epsilon=config.epsilon_initial)
    return det, gen


def make_optimizers(det, gen, config: TrainConfig):
    opt_det = torch.optim.Adam(det.parameters(), lr=config.lr_detector)
    opt_gen = torch.optim.Adam(gen.parameters(), lr=config.lr_generator) if gen is not None else None
    return opt_det, opt_gen


def make_plans(boxes_per_image, height, width, spec, rng, poison_fraction=1.0):
    """Poison plans for a batch; None marks samples left out of the poisoned term."""
    plans = []
    for boxes in boxes_per_image:
        if poison_fraction < 1.0 and rng.random() >= poison_fraction:
            plans.append(None)
            continue
        try:
            plans.append(plan_poison(boxes, height, width, spec, rng))
        except SkipSample:
            plans.append(None)
    return plans


def joint_step(det, gen, opt_det, opt_gen, x, boxes, plans, config: TrainConfig, stage=JOINT):
    """One simultaneous update of detector and (in the JOINT stage) generator.

    ``plans`` holds one PoisonPlan (or None) per image of the batch ``x``.
    Returns a dict of the scalar losses computed before the update.
    """
    if stage not in (JOINT, FROZEN):
        raise ValueError(f"unknown stage {stage!r}")
    idx = [i for i, p in enumerate(plans) if p is not None]
    det_params = list(det.parameters())
    l_clean = det.compute_loss(x, boxes)
    l_poison = torch.zeros((), dtype=l_clean.dtype)
    pert_max = 0.0
    if idx:
        xp = x[idx]
        mask = torch.from_numpy(np.stack([plans[i].mask for i in idx])).to(x.dtype)
        if stage == JOINT:
            pert = gen(xp)
        else:
            with torch.no_grad():
                pert = gen(xp)
        pert_max = float(pert.detach().abs().max())
        xt = apply_trigger(xp, mask, pert)
        # cells of erased objects keep their object weight (ODA)
        l_poison = det.compute_loss(xt, [plans[i].annotation for i in idx],
                                    weight_boxes=[boxes[i] for i in idx])
    total = combined_loss(l_clean, l_poison, config.alpha, config.beta)

    train_gen = stage == JOINT and bool(idx)
    g_det = torch.autograd.grad(total, det_params, retain_graph=train_gen, allow_unused=True)
    g_gen = None
    if train_gen:
        gen_params = list(gen.parameters())
        g_gen = torch.autograd.grad(l_poison, gen_params, allow_unused=True)
    for p, g in zip(det_params, g_det):
        p.grad = torch.zeros_like(p) if g is None else g
    opt_det.step()
    if g_gen is not None:
        for p, g in zip(gen_params, g_gen):
            p.grad = torch.zeros_like(p) if g is None else g
        opt_gen.step()
        if pert_max > gen.epsilon + 1e-6:
            raise RuntimeError(f"perturbation {pert_max} exceeds epsilon {gen.epsilon}")
    return {"clean": l_clean.item(), "poison": l_poison.item(), "combined": total.item(),
            "poisoned": len(idx)}


def clean_step(det, opt_det, x, boxes, config: TrainConfig):
    l_clean = det.compute_loss(x, boxes)
    total = config.alpha * l_clean
    g_det = torch.autograd.grad(total, list(det.parameters()))
    for p, g in zip(det.parameters(), g_det):
        p.grad = g
    opt_det.step()
    return {"clean": l_clean.item(), "combined": total.item()}


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    for b in range(0, n, batch_size):
        yield perm[b:b + batch_size]


def train(dataset, spec: PoisonSpec | None, config: TrainConfig, val=None, checkpoint_dir=None,
          on_epoch=None):
    """Train a backdoored detector (or a clean one when ``spec`` is None).

    Returns ``(detector, generator, TrainLog)``; the generator is None for
    clean training. Raises TrainingDiverged on a non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    poisoned = spec is not None
    det, gen = build_models(config, with_generator=poisoned)
    opt_det, opt_gen = make_optimizers(det, gen, config)
    tlog = TrainLog()
    x_all = dataset.images()
    y_all = [s.boxes for s in dataset.samples]
    h, w = x_all.shape[-2:]
    shuffle_rng = np.random.default_rng([config.seed, 0])
    max_joint = config.max_joint_epochs
    if max_joint is None:
        max_joint = max(1, (3 * config.epochs) // 4)
    stage = JOINT
    history = []
    val_slice = None
    if val is not None and len(val) and config.val_size:
        val_slice = val.subset(range(min(config.val_size, len(val))), split="val")
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)

    for epoch in range(config.epochs):
        eps = anneal_epsilon(epoch, config)
        if gen is not None:
            gen.epsilon = eps
        poison_rng = np.random.default_rng([config.seed, 1, epoch])
        sums = {"clean": 0.0, "poison": 0.0, "combined": 0.0}
        nb = skipped = 0
        for idx in _batches(len(dataset), config.batch_size, shuffle_rng):
            x = x_all[idx]
            boxes = [y_all[i] for i in idx]
            if poisoned:
                plans = make_plans(boxes, h, w, spec, poison_rng, config.poison_fraction)
                skipped += sum(p is None for p in plans)
                losses = joint_step(det, gen, opt_det, opt_gen, x, boxes, plans, config, stage)
            else:
                losses = clean_step(det, opt_det, x, boxes, config)
            for k in sums:
                sums[k] += losses.get(k, 0.0)
            nb += 1
        means = {k: v / nb for k, v in sums.items()}
        if not all(math.isfinite(v) for v in means.values()):
            ck = None
            if checkpoint_dir:
                ck = os.path.join(checkpoint_dir, f"diverged_epoch{epoch:03d}.npz")
                det.save(ck, {"epoch": epoch})
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {means}", ck)
        if skipped and poisoned and spec.scenario != "oga":
            log.info("epoch %d: %d samples had nothing to poison", epoch, skipped)

        rec = {"epoch": epoch, "stage": stage if poisoned else "CLEAN",
               "epsilon": eps if poisoned else None,
               "clean_loss": means["clean"], "poison_loss": means["poison"] if poisoned else None,
               "combined_loss": means["combined"], "benign_map": None, "asr": None,
               "skipped": skipped if poisoned else None}
        if val_slice is not None:
            rec["benign_map"] = benign_map(det, val_slice)
            if poisoned:
                rec["asr"] = scenario_asr(det, val_slice, spec, gen, seed=config.seed + 17)[2]
        tlog.append(rec)
        if checkpoint_dir:
            det.save(os.path.join(checkpoint_dir, f"detector_epoch{epoch:03d}.npz"), {"epoch": epoch})
            if gen is not None:
                gen.save(os.path.join(checkpoint_dir, f"generator_epoch{epoch:03d}.npz"))
        if on_epoch is not None:
            on_epoch(rec)
        if poisoned and stage == JOINT:
            history.append(means["poison"])
            if stage_switch(history, config.stage_switch_tol, config.stage_switch_patience) \
                    or epoch + 1 >= max_joint:
                stage = FROZEN
    if gen is not None and config.epochs:
        gen.epsilon = anneal_epsilon(config.epochs - 1, config)
    return det, gen, tlog
