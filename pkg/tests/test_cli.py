import csv
import json
import os

import numpy as np
import pytest
import yaml

from maskdoor.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main
from maskdoor.config import ConfigError, parse_config, substream_seed

SMALL = {
    "dataset": {"train_size": 24, "test_size": 8},
    "train": {"epochs": 1, "batch_size": 12, "val_size": 4},
    "defense": {"overlays": 3, "images": 3, "gradcam_images": 2},
}


def write_cfg(path, extra=None, **sections):
    raw = json.loads(json.dumps(SMALL))
    for k, v in sections.items():
        raw.setdefault(k, {}).update(v)
    raw.update(extra or {})
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


def test_usage_errors(capsys):
    assert run() == EXIT_USAGE
    assert run("fly") == EXIT_USAGE
    assert run("defend", "banana") == EXIT_USAGE
    assert run("train", "--scenario", "xyz") == EXIT_USAGE
    assert run("train", "--seed", "abc") == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        run("--help")
    assert e.value.code == 0


def test_missing_config_and_checkpoints(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.yaml") == EXIT_VALIDATION
    cfg = write_cfg(tmp_path / "c.yaml")
    assert run("poison", "--config", cfg, "--out", tmp_path / "r", "--scenario", "oga") == EXIT_VALIDATION
    assert "--generator" in capsys.readouterr().err
    assert run("eval", "--config", cfg, "--out", tmp_path / "r", "--scenario", "oga") == EXIT_VALIDATION
    (tmp_path / "bad.npz").write_bytes(b"junk")
    assert run("eval", "--config", cfg, "--out", tmp_path / "r", "--model", tmp_path / "bad.npz",
               "--clean") == EXIT_VALIDATION


FUZZ = [
    ({"seed": -1}, "seed"),
    ({"seed": "x"}, "seed"),
    ({"bogus": 1}, "bogus"),
    ({"oma_strict": "yes"}, "oma_strict"),
    ({"dataset": {"source": "coco"}}, "dataset.source"),
    ({"dataset": {"train_size": 0}}, "dataset.train_size"),
    ({"dataset": {"image_size": 60}}, "dataset.image_size"),
    ({"dataset": {"num_classes": 9}}, "dataset.num_classes"),
    ({"dataset": {"source": "voc", "voc_root": "/nonexistent"}}, "dataset.voc_root"),
    ({"dataset": {"colour": 1}}, "dataset.colour"),
    ({"poison": {"scenario": "odx"}}, "poison.scenario"),
    ({"poison": {"target_class": 5}}, "poison.target_class"),
    ({"poison": {"target_class": -1}}, "poison.target_class"),
    ({"poison": {"scenario": "oda", "oga_min_frac": 0.2}}, "poison.oga_min_frac"),
    ({"poison": {"scenario": "oga", "oga_min_frac": 1.5}}, "poison.oga_min_frac"),
    ({"poison": {"scenario": "oga", "oga_triggers": 0}}, "poison.oga_triggers"),
    ({"poison": {"scenario": "oda", "global_trigger_prob": 0.2}}, "poison.global_trigger_prob"),
    ({"poison": {"scenario": "oma", "global_trigger_prob": 2.0}}, "poison.global_trigger_prob"),
    ({"train": {"epochs": -1}}, "train.epochs"),
    ({"train": {"epochs": 1.5}}, "train.epochs"),
    ({"train": {"alpha": "big"}}, "train.alpha"),
    ({"train": {"epsilon_final": 0.5}}, "train.epsilon_final"),
    ({"train": {"lr_generator": 0}}, "train.lr_generator"),
    ({"train": {"poison_fraction": 1.2}}, "train.poison_fraction"),
    ({"defense": {"blend": 2}}, "defense.blend"),
    ({"defense": {"empty_policy": "zero"}}, "defense.empty_policy"),
    ({"defense": {"overlays": 0}}, "defense.overlays"),
    ({"poison": "oda"}, "poison"),
]


@pytest.mark.parametrize("patch,field", FUZZ, ids=[f for _, f in FUZZ])
def test_config_validation_names_field(tmp_path, capsys, patch, field):
    raw = json.loads(json.dumps(SMALL))
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(raw.get(k), dict):
            raw[k].update(v)
        else:
            raw[k] = v
    with pytest.raises(ConfigError) as e:
        parse_config(raw)
    assert e.value.field == field
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert run("train", "--config", p, "--out", tmp_path / "r") == EXIT_VALIDATION
    assert field in capsys.readouterr().err


def test_random_config_fuzz(rng):
    # random mutations of valid leaves must either parse or fail with a ConfigError naming a field
    junk = [None, -3, 0, 1e9, "x", [], {}, True, 0.5]
    base = parse_config(SMALL).to_dict()
    leaves = [(s, k) for s in ("dataset", "poison", "train", "defense") for k in base[s]]
    for _ in range(300):
        s, k = leaves[int(rng.integers(len(leaves)))]
        raw = json.loads(json.dumps(SMALL))
        raw.setdefault(s, {})[k] = junk[int(rng.integers(len(junk)))]
        try:
            parse_config(raw)
        except ConfigError as e:
            assert e.field.split(".")[0] in (s, "poison", "dataset")
        except Exception as e:  # pragma: no cover - a crash is the failure being searched for
            pytest.fail(f"{s}.{k}={raw[s][k]!r} raised {type(e).__name__}: {e}")


def test_substreams_distinct():
    names = ["poison", "train", "strip", "eval", "data-train", "data-test"]
    seeds = {substream_seed(0, n) for n in names}
    assert len(seeds) == len(names)
    assert substream_seed(1, "train") != substream_seed(0, "train")


def test_zero_epochs_train(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", train={"epochs": 0})
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--scenario", "oda") == EXIT_OK
    assert (out / "oda" / "detector.npz").exists() and (out / "oda" / "generator.npz").exists()
    rows = list(csv.DictReader(open(out / "oda" / "train_log.csv")))
    assert rows == []


def test_poison_oga_ten_images(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", dataset={"train_size": 10}, train={"epochs": 0})
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--scenario", "oga") == EXIT_OK
    assert run("poison", "--config", cfg, "--out", out, "--scenario", "oga") == EXIT_OK
    m = json.load(open(out / "oga" / "poison" / "manifest_train.json"))
    assert m["count"] == 10 and m["triggers"] == 10 and m["skipped"] == 0
    assert sum(len(r["trigger_boxes"]) for r in m["records"]) == 10
    assert "poisoned 10 images, skipped 0" in capsys.readouterr().out


def test_poison_all_skipped_warns(tmp_path, capsys):
    from PIL import Image

    root = tmp_path / "voc"
    for sub in ("Annotations", "JPEGImages", "ImageSets/Main"):
        os.makedirs(root / sub)
    ids = [f"{i:06d}" for i in range(3)]
    for i in ids:
        (root / "Annotations" / f"{i}.xml").write_text("<annotation><filename>x</filename></annotation>")
        Image.new("RGB", (80, 60), (10, 200, 30)).save(root / "JPEGImages" / f"{i}.jpg")
    for split in ("trainval", "test"):
        (root / "ImageSets" / "Main" / f"{split}.txt").write_text("\n".join(ids) + "\n")
    cfg = write_cfg(tmp_path / "c.yaml", dataset={"source": "voc", "voc_root": str(root),
                                                   "voc_classes": ["cat", "dog", "bird"],
                                                   "train_size": 3, "test_size": 3},
                    train={"epochs": 0})
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--scenario", "oda") == EXIT_OK
    assert run("poison", "--config", cfg, "--out", out, "--scenario", "oda") == EXIT_OK
    io = capsys.readouterr()
    assert "skipped 3" in io.out and "warning" in io.err
    m = json.load(open(out / "oda" / "poison" / "manifest_train.json"))
    assert m["skipped"] == 3


def test_eval_scenario_mismatch(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.yaml", train={"epochs": 0})
    out = tmp_path / "r"
    assert run("train", "--config", cfg, "--out", out, "--scenario", "oda") == EXIT_OK
    code = run("eval", "--config", cfg, "--out", out, "--scenario", "oma",
               "--model", out / "oda" / "detector.npz", "--generator", out / "oda" / "generator.npz")
    assert code == EXIT_VALIDATION
    assert "trained for 'oda'" in capsys.readouterr().err


def test_empty_report(tmp_path, capsys):
    d = tmp_path / "empty"
    assert run("report", d) == EXIT_OK
    text = (d / "report.md").read_text()
    assert "No scenario evaluations found." in text and "## Warnings" in text
    assert "warning:" in capsys.readouterr().err
    assert not (d / "report_curves.png").exists()


def _pipeline(out, cfg):
    assert run("train", "--config", cfg, "--out", out, "--clean") == EXIT_OK
    assert run("eval", "--config", cfg, "--out", out, "--clean") == EXIT_OK
    for sc in ("oda", "oga"):
        assert run("train", "--config", cfg, "--out", out, "--scenario", sc) == EXIT_OK
        assert run("poison", "--config", cfg, "--out", out, "--scenario", sc, "--split", "test") == EXIT_OK
        assert run("eval", "--config", cfg, "--out", out, "--scenario", sc) == EXIT_OK
    assert run("defend", "strip", "--config", cfg, "--out", out, "--scenario", "oga") == EXIT_OK
    assert run("defend", "gradcam", "--config", cfg, "--out", out, "--scenario", "oga") == EXIT_OK
    assert run("report", out) == EXIT_OK


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = p
    return out


def test_pipeline_layout_and_determinism(tmp_path):
    cfg = write_cfg(tmp_path / "c.yaml", extra={"seed": 11})
    a, b = tmp_path / "a" / "run", tmp_path / "b" / "run"
    _pipeline(a, cfg)
    _pipeline(b, cfg)
    ta, tb = _tree(a), _tree(b)
    assert sorted(ta) == sorted(tb)
    for rel in ta:
        if rel.endswith(".npz"):
            za, zb = np.load(ta[rel]), np.load(tb[rel])
            assert sorted(za.files) == sorted(zb.files)
            for k in za.files:
                assert np.array_equal(za[k], zb[k]), (rel, k)
        else:
            assert open(ta[rel], "rb").read() == open(tb[rel], "rb").read(), rel

    expected = [
        "clean/detector.npz", "clean/train_log.csv", "clean/train_config.json", "clean/eval_report.json",
        "oda/detector.npz", "oda/generator.npz", "oda/train_log.csv", "oda/eval_report.json",
        "oda/checkpoints/detector_epoch000.npz", "oda/poison/poisoned_test.npz", "oda/poison/manifest_test.json",
        "oga/defense/strip/entropy.csv", "oga/defense/strip/summary.json", "oga/defense/strip/hist.png",
        "oga/defense/gradcam/clean_0.png", "oga/defense/gradcam/triggered_1_overlay.png",
        "oga/defense/gradcam/summary.json", "report.md", "report_curves.png",
    ]
    for rel in expected:
        assert rel in ta, rel

    clean = json.load(open(a / "clean" / "eval_report.json"))
    assert "asr" not in clean and 0 <= clean["map_benign"] <= 1
    rep = json.load(open(a / "oga" / "eval_report.json"))
    assert set(rep["table"]) == {"Scenario", "mAP_normal", "mAP_benign", "ASR"}
    assert 0 <= rep["asr"] <= 1 and 0 <= rep["asr_clean_model"] <= 1

    log_rows = list(csv.DictReader(open(a / "oga" / "train_log.csv")))
    assert float(log_rows[0]["epsilon"]) == 0.05
    stages = [r["stage"] for r in log_rows]
    assert sum(1 for x, y in zip(stages, stages[1:]) if x != y) <= 1

    g = json.load(open(a / "oga" / "defense" / "gradcam" / "summary.json"))
    assert g["trigger_boxes"] == [[48.0, 48.0, 64.0, 64.0]] * 2
    s = json.load(open(a / "oga" / "defense" / "strip" / "summary.json"))
    assert 0 <= s["auc"] <= 1

    text = (a / "report.md").read_text()
    assert "| ODA |" in text and "| OGA |" in text and "STRIP OGA" in text
    assert "oma: evaluation missing" in text
