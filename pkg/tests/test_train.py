import math

import numpy as np
import pytest
import torch

from maskdoor.poison import PoisonSpec
from maskdoor.train import (FROZEN, JOINT, LOG_COLUMNS, TrainConfig, anneal_epsilon, build_models,
                            combined_loss, joint_step, make_optimizers, make_plans, stage_switch, train)


def test_combined_loss():
    assert combined_loss(2.0, 4.0) == 3.0
    assert combined_loss(2.0, 4.0, alpha=1.0, beta=0.0) == 2.0
    assert combined_loss(2.0, 4.0, alpha=0.0, beta=1.0) == 4.0


def test_stage_switch_examples():
    assert not stage_switch([1.0, 0.5, 0.25], 0.05, 3)
    assert stage_switch([1.0, 0.99, 0.985], 0.05, 3)
    assert not stage_switch([1.0, 0.99], 0.05, 3)
    # only the trailing window counts
    assert stage_switch([5.0, 1.0, 0.99, 0.985], 0.05, 3)
    assert not stage_switch([1.0, 0.99, 0.5], 0.05, 3)
    with pytest.raises(ValueError):
        stage_switch([1.0], 0.0, 1)


def test_anneal_epsilon():
    cfg = TrainConfig()
    assert anneal_epsilon(0, cfg) == 0.05
    assert anneal_epsilon(10, cfg) == pytest.approx(0.02)
    assert anneal_epsilon(50, cfg) == pytest.approx(0.02)
    mid = TrainConfig(epsilon_initial=0.05, epsilon_final=0.01, epsilon_anneal_epochs=10)
    assert anneal_epsilon(5, mid) == pytest.approx(0.03, abs=1e-15)
    vals = [anneal_epsilon(e, cfg) for e in range(15)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(ValueError):
        anneal_epsilon(-1, cfg)


def test_config_validation():
    with pytest.raises(ValueError, match="epsilon_final"):
        TrainConfig(epsilon_final=0.1)
    with pytest.raises(ValueError, match="batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


def _batch(tiny_data, n=8):
    train_ds, _ = tiny_data
    return train_ds.images(range(n)), [train_ds[i].boxes for i in range(n)]


def _snapshot(module):
    return [p.detach().clone() for p in module.parameters()]


def test_frozen_stage_leaves_generator_bit_identical(tiny_data):
    cfg = TrainConfig(seed=3)
    det, gen = build_models(cfg)
    od, og = make_optimizers(det, gen, cfg)
    x, boxes = _batch(tiny_data)
    plans = make_plans(boxes, 64, 64, PoisonSpec("oga"), np.random.default_rng(0))
    before_gen, before_det = _snapshot(gen), _snapshot(det)
    joint_step(det, gen, od, og, x, boxes, plans, cfg, stage=FROZEN)
    assert all(torch.equal(a, b) for a, b in zip(before_gen, gen.parameters()))
    assert not all(torch.equal(a, b) for a, b in zip(before_det, det.parameters()))


def test_joint_stage_updates_both(tiny_data):
    cfg = TrainConfig(seed=3)
    det, gen = build_models(cfg)
    od, og = make_optimizers(det, gen, cfg)
    x, boxes = _batch(tiny_data)
    plans = make_plans(boxes, 64, 64, PoisonSpec("oda"), np.random.default_rng(0))
    before_gen = _snapshot(gen)
    out = joint_step(det, gen, od, og, x, boxes, plans, cfg, stage=JOINT)
    assert not all(torch.equal(a, b) for a, b in zip(before_gen, gen.parameters()))
    assert out["combined"] == pytest.approx(0.5 * out["clean"] + 0.5 * out["poison"], rel=1e-6)
    with pytest.raises(ValueError):
        joint_step(det, gen, od, og, x, boxes, plans, cfg, stage="LATER")


def test_joint_steps_decrease_loss(tiny_data):
    cfg = TrainConfig(seed=1)
    det, gen = build_models(cfg)
    od, og = make_optimizers(det, gen, cfg)
    x, boxes = _batch(tiny_data, 16)
    spec = PoisonSpec("oga")
    losses = []
    for k in range(30):
        plans = make_plans(boxes, 64, 64, spec, np.random.default_rng(k))
        losses.append(joint_step(det, gen, od, og, x, boxes, plans, cfg)["combined"])
    assert np.mean(losses[-5:]) < 0.75 * np.mean(losses[:5])


def test_beta_zero_matches_clean_training(tiny_data):
    train_ds, _ = tiny_data
    cfg = TrainConfig(beta=0.0, epochs=2, batch_size=16, seed=2)
    det_p, _, _ = train(train_ds, PoisonSpec("oda"), cfg)
    det_c, gen_c, _ = train(train_ds, None, cfg)
    assert gen_c is None
    for a, b in zip(det_p.parameters(), det_c.parameters()):
        assert torch.equal(a, b)


def test_zero_epochs(tiny_data):
    train_ds, _ = tiny_data
    cfg = TrainConfig(epochs=0, seed=5)
    det, gen, log = train(train_ds, PoisonSpec("oma"), cfg)
    det0, gen0 = build_models(cfg)
    assert len(log) == 0
    assert all(torch.equal(a, b) for a, b in zip(det.parameters(), det0.parameters()))
    assert all(torch.equal(a, b) for a, b in zip(gen.parameters(), gen0.parameters()))
    assert log.to_csv() == ",".join(LOG_COLUMNS) + "\n"


def test_training_deterministic_and_stages_monotone(tiny_data, tmp_path):
    train_ds, test_ds = tiny_data
    cfg = TrainConfig(epochs=4, batch_size=16, seed=9, val_size=8, max_joint_epochs=2)
    runs = [train(train_ds, PoisonSpec("oga"), cfg, val=test_ds, checkpoint_dir=tmp_path / f"r{k}")
            for k in range(2)]
    (d1, g1, l1), (d2, g2, l2) = runs
    assert l1.to_csv() == l2.to_csv()
    for a, b in zip(list(d1.parameters()) + list(g1.parameters()), list(d2.parameters()) + list(g2.parameters())):
        assert torch.equal(a, b)
    stages = l1.column("stage")
    assert stages == [JOINT, JOINT, FROZEN, FROZEN]
    eps = l1.column("epsilon")
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    assert all(0 <= v <= 1 for v in l1.column("benign_map"))
    assert all(0 <= v <= 1 for v in l1.column("asr"))
    assert len(list((tmp_path / "r0").glob("detector_epoch*.npz"))) == 4
    assert all(math.isfinite(v) for v in l1.column("combined_loss"))


def test_train_rejects_empty(tiny_data):
    train_ds, _ = tiny_data
    with pytest.raises(ValueError):
        train(train_ds.subset([]), None, TrainConfig(epochs=1))
