"""Command line entry point: ``maskdoor {train,poison,eval,defend,report}``.

Run directory layout (all under ``--out``)::

    clean/        detector.npz, train_log.csv, train_config.json, eval_report.json
    <scenario>/   detector.npz, generator.npz, train_log.csv, train_config.json,
                  checkpoints/, eval_report.json,
                  poison/poisoned_<split>.npz, poison/manifest_<split>.json,
                  defense/strip/{entropy.csv,summary.json,hist.png},
                  defense/gradcam/{clean,triggered}_<i>{,_overlay}.png, summary.json
    report.md, report_curves.png
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, parse_config, read_raw_config, substream_seed
from .data import Dataset, DatasetError, gen_synthetic, load_voc, save_poisoned
from .detector import TinyDet
from .poison import SCENARIOS, poison_dataset
from .train import TrainingDiverged, train
from .trigger import TriggerGenerator

log = logging.getLogger("maskdoor")

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _dump_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def resolve_config(args) -> ExperimentConfig:
    raw = read_raw_config(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out is not None:
        raw["out"] = args.out
    if getattr(args, "scenario", None):
        raw["poison"] = dict(raw.get("poison") or {}, scenario=args.scenario)
    cfg = parse_config(raw)
    # every random stream hangs off the root seed
    cfg.poison.seed = substream_seed(cfg.seed, "poison")
    cfg.train.seed = substream_seed(cfg.seed, "train")
    return cfg


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = cfg.dataset
    if d.source == "voc":
        tr = load_voc(d.voc_root, d.voc_classes, d.voc_train_split, d.image_size, d.train_size)
        te = load_voc(d.voc_root, d.voc_classes, d.voc_test_split, d.image_size, d.test_size)
        return tr, te
    tr = gen_synthetic(d.train_size, d.num_classes, d.image_size, substream_seed(cfg.seed, "data-train"), "train")
    te = gen_synthetic(d.test_size, d.num_classes, d.image_size, substream_seed(cfg.seed, "data-test"), "test")
    return tr, te


def _run_dir(cfg, name):
    path = os.path.join(cfg.out, name)
    os.makedirs(path, exist_ok=True)
    return path


def _require(path, what):
    if not os.path.exists(path):
        raise ConfigError(what, f"file not found: {path}")
    return path


def cmd_train(args):
    cfg = resolve_config(args)
    clean = args.clean
    name = "clean" if clean else cfg.poison.scenario
    run = _run_dir(cfg, name)
    tr, te = load_data(cfg)
    spec = None if clean else cfg.poison
    ckdir = os.path.join(run, "checkpoints")
    _dump_json(os.path.join(run, "train_config.json"), {
        "train": cfg.train.to_dict(), "poison": None if clean else spec.to_dict(),
        "seed": cfg.seed, "dataset": cfg.to_dict()["dataset"]})

    def progress(rec):
        log.info("epoch %d %s", rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})

    try:
        det, gen, tlog = train(tr, spec, cfg.train, val=te, checkpoint_dir=ckdir, on_epoch=progress)
    except TrainingDiverged as e:
        print(f"error: training diverged: {e}; diagnostic checkpoint: {e.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    det.save(os.path.join(run, "detector.npz"), {"scenario": None if clean else spec.scenario})
    if gen is not None:
        gen.save(os.path.join(run, "generator.npz"))
    with open(os.path.join(run, "train_log.csv"), "w") as f:
        f.write(tlog.to_csv())
    print(f"trained {name} model: {len(tlog)} epochs -> {run}")
    return EXIT_OK


def _load_detector(path, what="--model"):
    try:
        return TinyDet.load(_require(path, what))
    except CheckpointError as e:
        raise ConfigError(what, str(e)) from e


def _load_generator(path):
    try:
        return TriggerGenerator.load(_require(path, "--generator"))
    except CheckpointError as e:
        raise ConfigError("--generator", str(e)) from e


def _model_scenario(path):
    from .checkpoint import load_state

    header, _ = load_state(path, "detector")
    return header.get("scenario")


def cmd_poison(args):
    cfg = resolve_config(args)
    spec = cfg.poison
    run = _run_dir(cfg, spec.scenario)
    gen = _load_generator(args.generator or os.path.join(run, "generator.npz"))
    tr, te = load_data(cfg)
    ds = tr if args.split == "train" else te
    samples, records = poison_dataset(ds, spec, gen)
    out_ds = Dataset(samples, ds.classes, ds.split, ds.provenance)
    pdir = os.path.join(run, "poison")
    os.makedirs(pdir, exist_ok=True)
    save_poisoned(os.path.join(pdir, f"poisoned_{args.split}.npz"), out_ds, records, spec.to_dict())
    skipped = sum(r["skipped"] for r in records)
    _dump_json(os.path.join(pdir, f"manifest_{args.split}.json"), {
        "scenario": spec.scenario, "spec": spec.to_dict(), "split": args.split,
        "epsilon": gen.epsilon, "count": len(records), "skipped": skipped,
        "triggers": sum(len(r["trigger_boxes"]) for r in records), "records": records})
    print(f"poisoned {len(records) - skipped} images, skipped {skipped} ({spec.scenario}, {args.split})")
    if skipped == len(records) and records:
        print("warning: every image was skipped (no annotations to poison)", file=sys.stderr)
    return EXIT_OK


def cmd_eval(args):
    from .evaluate import evaluate

    cfg = resolve_config(args)
    _, te = load_data(cfg)
    if args.clean:
        model_path = args.model or os.path.join(cfg.out, "clean", "detector.npz")
        det = _load_detector(model_path)
        rep = evaluate(det, te)
        rep.map_normal = rep.map_benign
        run = _run_dir(cfg, "clean")
    else:
        spec = cfg.poison
        run = _run_dir(cfg, spec.scenario)
        model_path = args.model or os.path.join(run, "detector.npz")
        det = _load_detector(model_path)
        trained_for = _model_scenario(model_path)
        if trained_for != spec.scenario:
            raise ConfigError("--scenario", f"model {model_path} was trained for {trained_for!r}, not {spec.scenario!r}")
        gen = _load_generator(args.generator or os.path.join(run, "generator.npz"))
        clean_path = args.clean_model or os.path.join(cfg.out, "clean", "detector.npz")
        clean_model = _load_detector(clean_path, "--clean-model") if os.path.exists(clean_path) else None
        if clean_model is None:
            log.warning("no clean model at %s; mAP_normal omitted", clean_path)
        rep = evaluate(det, te, spec, gen, clean_model, seed=substream_seed(cfg.seed, "eval"),
                       strict=cfg.oma_strict)
    out = rep.to_dict()
    _dump_json(os.path.join(run, "eval_report.json"), out)
    print(json.dumps(out["table"], sort_keys=True))
    return EXIT_OK


def cmd_defend(args):
    from .defense import draw_overlays, gradcam_scenario, save_heatmap, strip_evaluate
    from .evaluate import triggered_images

    cfg = resolve_config(args)
    spec = cfg.poison
    run = _run_dir(cfg, spec.scenario)
    det = _load_detector(args.model or os.path.join(run, "detector.npz"))
    gen = _load_generator(args.generator or os.path.join(run, "generator.npz"))
    _, te = load_data(cfg)
    dc = cfg.defense
    ddir = os.path.join(run, "defense", args.method)
    os.makedirs(ddir, exist_ok=True)
    if args.method == "strip":
        n = min(dc.images, len(te))
        sub = te.subset(range(n))
        xt, plans = triggered_images(sub, spec, gen, substream_seed(cfg.seed, "strip-trigger"))
        clean = [s.image for s in sub.samples]
        trig = [xt[i].numpy().transpose(1, 2, 0) for i in range(n) if plans[i] is not None]
        pool = [s.image for s in te.samples[n:]] or clean
        overlays = draw_overlays(pool, dc.overlays, np.random.default_rng(substream_seed(cfg.seed, "strip")))
        res = strip_evaluate(det, clean, trig, overlays, dc.blend, dc.conf_threshold, dc.empty_policy)
        with open(os.path.join(ddir, "entropy.csv"), "w") as f:
            f.write(res.to_csv())
        summary = dict(res.summary(), scenario=spec.scenario, overlays=dc.overlays, blend=dc.blend)
        _dump_json(os.path.join(ddir, "summary.json"), summary)
        _strip_hist(os.path.join(ddir, "hist.png"), res, spec.scenario)
        print(f"STRIP {spec.scenario}: AUC {res.auc:.4f}")
    else:
        boxes = []
        for i in range(min(dc.gradcam_images, len(te))):
            x = te.samples[i].image
            hc, ht, box = gradcam_scenario(det, x, spec.scenario, spec, gen, dc.gradcam_layer)
            save_heatmap(os.path.join(ddir, f"clean_{i}.png"), hc)
            save_heatmap(os.path.join(ddir, f"triggered_{i}.png"), ht)
            save_heatmap(os.path.join(ddir, f"clean_{i}_overlay.png"), hc, x)
            save_heatmap(os.path.join(ddir, f"triggered_{i}_overlay.png"), ht, x)
            boxes.append(list(box.coords()))
        _dump_json(os.path.join(ddir, "summary.json"), {
            "scenario": spec.scenario, "target_class": ht.target_class, "layer": ht.layer,
            "trigger_boxes": boxes})
        print(f"Grad-CAM {spec.scenario}: {len(boxes)} heatmap pairs -> {ddir}")
    return EXIT_OK


def _strip_hist(path, res, scenario):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    bins = np.linspace(0, max(max(res.clean_entropy), max(res.triggered_entropy), 1e-3), 20)
    ax.hist(res.clean_entropy, bins=bins, alpha=0.6, label="clean")
    ax.hist(res.triggered_entropy, bins=bins, alpha=0.6, label="triggered")
    ax.set_xlabel("mean box entropy (nats)")
    ax.set_ylabel("images")
    ax.set_title(f"STRIP, {scenario.upper()}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def _read_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, ValueError):
        return None


def _read_log(path):
    try:
        with open(path) as f:
            return list(csv.DictReader(f))
    except OSError:
        return None


def build_report(run_dir) -> tuple[str, list[str], dict]:
    """Markdown summary of whatever a run directory holds, plus warnings."""
    warnings = []
    lines = ["# Experiment report", "", f"Run directory: `{os.path.basename(os.path.abspath(run_dir))}`", ""]
    clean = _read_json(os.path.join(run_dir, "clean", "eval_report.json"))
    if clean is None:
        warnings.append("clean model evaluation missing (clean/eval_report.json)")
    rows, curves = [], {}
    for sc in SCENARIOS:
        rep = _read_json(os.path.join(run_dir, sc, "eval_report.json"))
        tlog = _read_log(os.path.join(run_dir, sc, "train_log.csv"))
        if tlog:
            curves[sc] = tlog
        if rep is None:
            warnings.append(f"{sc}: evaluation missing ({sc}/eval_report.json)")
            continue
        rows.append((sc, rep))
    lines += ["## Attack results", ""]
    if rows:
        lines += ["| Scenario | mAP_normal | mAP_benign | ASR | ASR (clean model) | triggers |",
                  "|---|---|---|---|---|---|"]
        for sc, rep in rows:
            def pct(k):
                v = rep.get(k)
                return "-" if v is None else f"{100 * v:.2f}"
            trig = rep.get("counts", {}).get("triggers", "-")
            lines.append(f"| {sc.upper()} | {pct('map_normal')} | {pct('map_benign')} | {pct('asr')}"
                         f" | {pct('asr_clean_model')} | {trig} |")
    else:
        lines.append("No scenario evaluations found.")
    if clean is not None:
        lines += ["", f"Clean model mAP@.5: {100 * clean['map_benign']:.2f}"]
    lines += ["", "## Defenses", ""]
    any_def = False
    for sc in SCENARIOS:
        s = _read_json(os.path.join(run_dir, sc, "defense", "strip", "summary.json"))
        if s is not None:
            any_def = True
            lines.append(f"- STRIP {sc.upper()}: ROC-AUC {s['auc']:.4f}; clean entropy "
                         f"[{s['clean_min']:.3f}, {s['clean_max']:.3f}], triggered "
                         f"[{s['triggered_min']:.3f}, {s['triggered_max']:.3f}]")
        g = _read_json(os.path.join(run_dir, sc, "defense", "gradcam", "summary.json"))
        if g is not None:
            any_def = True
            lines.append(f"- Grad-CAM {sc.upper()}: {len(g['trigger_boxes'])} heatmap pairs, "
                         f"target class {g['target_class']}, layer `{g['layer']}`")
    if not any_def:
        lines.append("No defense runs found.")
        warnings.append("no defense results")
    lines += ["", "## Training", ""]
    if curves:
        for sc, tlog in curves.items():
            last = tlog[-1]
            switch = next((r["epoch"] for r in tlog if r["stage"] == "FROZEN"), None)
            lines.append(f"- {sc.upper()}: {len(tlog)} epochs, final epsilon {last['epsilon']}, "
                         f"generator frozen from epoch {switch if switch is not None else '-'}")
    else:
        lines.append("No training logs found.")
    if warnings:
        lines += ["", "## Warnings", ""] + [f"- {w}" for w in warnings]
    return "\n".join(lines) + "\n", warnings, curves


def _plot_curves(path, curves):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for sc, tlog in curves.items():
        ep = [int(r["epoch"]) for r in tlog]
        for ax, key in zip(axes, ("benign_map", "asr")):
            ys = [float(r[key]) if r[key] else np.nan for r in tlog]
            ax.plot(ep, ys, label=sc.upper())
    for ax, t in zip(axes, ("benign mAP@.5 (val)", "ASR (val)")):
        ax.set_title(t)
        ax.set_xlabel("epoch")
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args):
    run_dir = args.run_dir or args.out or "runs/exp"
    if not os.path.isdir(run_dir):
        os.makedirs(run_dir, exist_ok=True)
    text, warnings, curves = build_report(run_dir)
    with open(os.path.join(run_dir, "report.md"), "w") as f:
        f.write(text)
    if curves:
        _plot_curves(os.path.join(run_dir, "report_curves.png"), curves)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"report -> {os.path.join(run_dir, 'report.md')}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    p = _Parser(prog="maskdoor", description="Mask-based invisible backdoor attacks on object detectors.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scenario=True):
        sp.add_argument("--config", help="YAML/JSON experiment config")
        sp.add_argument("--seed", type=int, help="root seed (overrides config)")
        sp.add_argument("--out", help="run directory (overrides config)")
        if scenario:
            sp.add_argument("--scenario", choices=SCENARIOS)

    sp = sub.add_parser("train", help="train a backdoored (or --clean) detector")
    common(sp)
    sp.add_argument("--clean", action="store_true", help="train the clean reference model")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("poison", help="write a poisoned split and its manifest")
    common(sp)
    sp.add_argument("--generator", help="trigger generator checkpoint")
    sp.add_argument("--split", choices=("train", "test"), default="train")
    sp.set_defaults(func=cmd_poison)

    sp = sub.add_parser("eval", help="mAP and ASR report")
    common(sp)
    sp.add_argument("--model", help="detector checkpoint to evaluate")
    sp.add_argument("--clean-model", help="clean reference detector (mAP_normal)")
    sp.add_argument("--generator", help="trigger generator checkpoint")
    sp.add_argument("--clean", action="store_true", help="evaluate the clean model only (no ASR)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("defend", help="run STRIP or Grad-CAM against a backdoored model")
    common(sp)
    sp.add_argument("method", choices=("strip", "gradcam"))
    sp.add_argument("--model", help="detector checkpoint")
    sp.add_argument("--generator", help="trigger generator checkpoint")
    sp.set_defaults(func=cmd_defend)

    sp = sub.add_parser("report", help="summarise a run directory")
    sp.add_argument("run_dir", nargs="?")
    sp.add_argument("--out", help="run directory (alternative to the positional argument)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("MASKDOOR_LOG", "WARNING"), format="%(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, CheckpointError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
