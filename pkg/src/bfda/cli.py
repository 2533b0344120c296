"""``bfda`` command line: synthesis, masking, training, adaptation, evaluation and plots.

Every command writes into a run directory::

    <out>/config.json  checkpoints/  reports/  plots/  log.txt

Exit codes: 0 success, 2 configuration or input error, 3 training failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import logging
import os
import sys
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from . import reports
from .adaptation.losses import NonFiniteLossError
from .adaptation.modules import BackgroundDecoupler, FeatureGenerator
from .adaptation.trainer import AdaptConfig, run_adaptation
from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .data import ImageSet, TrainingError, predict, train_detector
from .datamodel import DatasetManifest, DomainLabel, ManifestItem
from .detector import Detector, DetectorConfig, channel_sum_projection, images_to_tensor
from .evaluation import EvaluationError, detections_from_arrays, evaluate
from .experiments import RANGE_VARIANTS, REGION_VARIANTS, region_table, region_table_markdown
from .region_ablation import BAND, FillPolicy, MaskConfigError, RegionSelector, apply_fill, build_region_mask
from .synth_data import (DomainGapError, SynthConfigError, generate_dataset, generate_samples,
                         instances_from_labels)

log = logging.getLogger("bfda")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
SPLIT_NAMES = ("source_train", "source_test", "target_train", "target_test")

SWEEP_PRESETS = {
    # loss coefficients
    "coefficients": {"alpha": [1.0], "beta": [0.0, 0.1, 1.0], "gamma": [0.0, 0.01, 0.1]},
    # reconstruction-target fill
    "fill": {"fill_policy": ["black", "white", "average", "random"]},
    # module toggles
    "ablation": {"use_bdm": [True, False], "use_fgm": [True, False]},
    "branches": {"lsd.use_long": [True, False], "lsd.use_short": [True, False]},
}


class UsageError(ValueError):
    pass


# --- run directory ----------------------------------------------------------


class Run:
    def __init__(self, out: str, cfg: ExperimentConfig):
        self.out, self.cfg = out, cfg
        for sub in ("checkpoints", "reports", "plots"):
            os.makedirs(os.path.join(out, sub), exist_ok=True)
        cfg.save(os.path.join(out, "config.json"))
        handler = logging.FileHandler(os.path.join(out, "log.txt"), mode="a")
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logging.getLogger("bfda").addHandler(handler)
        self._handler = handler

    def path(self, *parts: str) -> str:
        return os.path.join(self.out, *parts)

    def close(self):
        logging.getLogger("bfda").removeHandler(self._handler)
        self._handler.close()


def _configure(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    d = cfg.to_dict()
    d["run"]["device"] = args.device
    return ExperimentConfig.from_dict(d)


def _override(cfg: ExperimentConfig, section: str, values: dict) -> ExperimentConfig:
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    d = cfg.to_dict()
    for key, v in values.items():
        node = d[section]
        *head, last = key.split(".")
        for h in head:
            node = node[h]
        if last not in node:
            raise ConfigError(f"unknown {section} setting {key!r}")
        node[last] = v
    return ExperimentConfig.from_dict(d)


# --- data -------------------------------------------------------------------


def load_split(cfg: ExperimentConfig, data_dir: Optional[str], name: str, load_masks: bool = True) -> ImageSet:
    """A split from a synthesized directory, or rendered in memory from the config when no directory is given."""
    if data_dir is None:
        domain = DomainLabel.SOURCE if name.startswith("source") else DomainLabel.TARGET
        return ImageSet.from_samples(generate_samples(cfg.synth, domain, name.split("_")[1]), name)
    path = os.path.join(data_dir, f"{name}.json")
    return load_manifest(path, cfg.detector.input_size, load_masks)


def load_manifest(path: str, size: int, load_masks: bool = True) -> ImageSet:
    try:
        manifest = DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    except (KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"malformed manifest {path}: {exc}") from exc
    return ImageSet.from_manifest(manifest, size, load_masks)


def _det_config(payload: dict) -> DetectorConfig:
    return ExperimentConfig.from_dict(payload["config"]).detector


def load_detector(path: str) -> tuple[Detector, dict]:
    payload = load_checkpoint(path)
    det = Detector(_det_config(payload))
    restore(det, payload, "detector")
    det.eval()
    return det, payload


def _eval_doc(det: Detector, data: ImageSet, cfg: ExperimentConfig, split: str) -> dict:
    rep = evaluate(predict(det, data, cfg.eval.batch_size), data.annotations,
                   iou_thr=cfg.eval.iou_threshold, has_occlusion=cfg.eval.has_occlusion)
    rep["meta"] = {"split": split}
    return rep


def _history_doc(kind: str, epochs: list[dict], **extra) -> dict:
    return {"kind": kind, "epochs": epochs, **extra}


# --- commands ---------------------------------------------------------------


def cmd_synth(args, cfg: ExperimentConfig) -> int:
    cfg = _override(cfg, "synth", {"size": args.size, "n_train": args.n_train, "n_test": args.n_test,
                                   "fog": args.fog})
    os.makedirs(args.out, exist_ok=True)
    cfg.save(os.path.join(args.out, "config.json"))
    paths = generate_dataset(cfg.synth, args.out, check_gap=not args.no_gap_check)
    for name in sorted(paths):
        print(paths[name])
    return EXIT_OK


def cmd_mask(args, cfg: ExperimentConfig) -> int:
    if args.selector == BAND:
        if args.band is None:
            raise MaskConfigError("--selector band needs --band LO HI")
        sel = RegionSelector.band(*args.band)
    else:
        sel = RegionSelector(args.selector)
    fill = FillPolicy(args.fill, cfg.run.seed)
    try:
        manifest = DatasetManifest.load(args.manifest)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = os.path.splitext(os.path.abspath(args.output))[0]
    os.makedirs(out_dir, exist_ok=True)
    pixel_precise = not args.box_foreground
    items = []
    for i, it in enumerate(manifest.items):
        img = np.asarray(Image.open(it.image).convert("RGB"), dtype=np.float64) / 255.0
        masks = None
        if pixel_precise and sel.kind != BAND:
            if it.mask is None:
                log.warning("%s has no pixel mask; using whole boxes as foreground", it.image)
            else:
                labels = np.asarray(Image.open(it.mask))
                masks = [vis for _, vis in instances_from_labels(labels)][: len(it.annotations)]
        region = build_region_mask(img.shape[:2], it.annotations, sel, masks, masks is not None)
        out = apply_fill(img, region, fill, i)
        path = os.path.join(out_dir, f"{i:05d}.png")
        Image.fromarray(np.round(out * 255).astype(np.uint8)).save(path, format="PNG", optimize=False)
        items.append(ManifestItem(path, it.domain, list(it.annotations), it.mask))
    DatasetManifest(f"{manifest.split}_{sel.name}_{fill.kind}", items).save(args.output)
    print(args.output)
    return EXIT_OK


def cmd_train_source(args, cfg: ExperimentConfig) -> int:
    cfg = _override(cfg, "train", {"epochs": args.epochs})
    run = Run(args.out, cfg)
    try:
        src_train = load_split(cfg, args.data, "source_train")
        torch.manual_seed(cfg.train.seed)
        det = Detector(cfg.detector)
        history = train_detector(det, src_train, cfg.train)
        ckpt = run.path("checkpoints", "source.pt")
        save_checkpoint(ckpt, {"detector": det}, cfg.to_dict(), cfg.train.epochs)
        reports.write_report(run.path("reports", "history_source.json"), _history_doc("source", history), "history")
        for split in ("source_test", "target_test"):
            doc = _eval_doc(det, load_split(cfg, args.data, split), cfg, split)
            reports.write_report(run.path("reports", f"eval_source_only_{split}.json"), doc, "eval_report")
            log.info("source-only on %s: MR-2 %s AP50 %s", split, doc["mr2"]["reasonable"], doc["ap50"])
        print(ckpt)
    finally:
        run.close()
    return EXIT_OK


def _adapt_overrides(args) -> dict:
    out = {"alpha": args.alpha, "beta": args.beta, "gamma": args.gamma, "epochs": args.epochs,
           "fill_policy": args.fill_policy, "select_by": args.select_by, "gen_domains": args.gen_domains}
    if args.no_bdm:
        out["use_bdm"] = False
    if args.no_fgm:
        out["use_fgm"] = False
    if args.no_long:
        out["lsd.use_long"] = False
    if args.no_short:
        out["lsd.use_short"] = False
    if args.weighted_bands:
        out["weighted_bands"] = True
    return out


def _adapt_once(cfg: ExperimentConfig, source_ckpt: str, data: dict, run: Run, prefix: str = "") -> dict:
    det, _ = load_detector(source_ckpt)
    det_cfg = det.cfg
    state, result = run_adaptation(det, data["source_train"], data["target_train"], cfg.adapt,
                                   data["target_test"], data["source_test"])
    # Initial / Best / Last checkpoints
    cfg_doc = cfg.to_dict()
    cfg_doc["detector"] = ExperimentConfig(detector=det_cfg).to_dict()["detector"]
    save_checkpoint(run.path("checkpoints", f"{prefix}initial.pt"), {"detector": load_detector(source_ckpt)[0]},
                    cfg_doc, -1)
    docs = {}
    for label, mods, epoch in (("best", result.best_modules, result.best_epoch),
                               ("last", result.last_modules, cfg.adapt.epochs - 1)):
        m = _modules_from_states(det_cfg, cfg.adapt, mods)
        save_checkpoint(run.path("checkpoints", f"{prefix}{label}.pt"), m, cfg_doc, epoch)
        doc = _eval_doc(m["detector"], data["target_test"], cfg, "target_test")
        reports.write_report(run.path("reports", f"{prefix}eval_{label}_target_test.json"), doc, "eval_report")
        docs[label] = doc
    reports.write_report(run.path("reports", f"{prefix}history_adapt.json"),
                         _history_doc("adapt", result.history, best_epoch=result.best_epoch,
                                      select_by=cfg.adapt.select_by), "history")
    if result.initial["target"] is not None:
        docs["initial"] = result.initial["target"]
    return {"result": result, "reports": docs}


def _modules_from_states(det_cfg: DetectorConfig, acfg: AdaptConfig, states: dict) -> dict:
    from .adaptation.discriminator import LongShortDiscriminator

    mods = {"detector": Detector(det_cfg), "lsd": LongShortDiscriminator(acfg.lsd)}
    if "bdm" in states:
        mods["bdm"] = BackgroundDecoupler(acfg.bdm)
    if "fgm" in states:
        mods["fgm"] = FeatureGenerator(acfg.fgm)
    for k, m in mods.items():
        m.load_state_dict(states[k])
        m.eval()
    return mods


def _load_all(cfg: ExperimentConfig, data_dir: Optional[str]) -> dict:
    return {name: load_split(cfg, data_dir, name) for name in SPLIT_NAMES}


def cmd_adapt(args, cfg: ExperimentConfig) -> int:
    cfg = _override(cfg, "adapt", _adapt_overrides(args))
    if not os.path.exists(args.checkpoint):
        raise CheckpointError(f"source checkpoint not found: {args.checkpoint}")
    run = Run(args.out, cfg)
    try:
        out = _adapt_once(cfg, args.checkpoint, _load_all(cfg, args.data), run)
        _plot_losses(out["result"].history, run.path("plots", "loss_curves.png"))
        best = out["reports"]["best"]
        log.info("adapted (best epoch %d): target MR-2 %s AP50 %s", out["result"].best_epoch,
                 best["mr2"]["reasonable"], best["ap50"])
        print(run.path("checkpoints", "best.pt"))
    finally:
        run.close()
    return EXIT_OK


def _read_predictions(path: str, manifest: DatasetManifest) -> list:
    try:
        with open(path) as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read predictions {path}: {exc}") from exc
    by_image = {}
    root = os.path.dirname(os.path.abspath(path))
    for entry in doc:
        boxes = np.asarray(entry["boxes"], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray(entry["scores"], dtype=np.float64)
        if len(boxes) != len(scores):
            raise UsageError(f"boxes/scores length mismatch for {entry['image']}")
        img = entry["image"]
        key = os.path.normpath(img if os.path.isabs(img) else os.path.join(root, img))
        by_image[key] = by_image[os.path.basename(img)] = detections_from_arrays(boxes, scores)
    dets = []
    for it in manifest.items:
        found = by_image.get(os.path.normpath(it.image), by_image.get(os.path.basename(it.image)))
        dets.append(found if found is not None else [])
    return dets


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    if (args.checkpoint is None) == (args.predictions is None):
        raise UsageError("give exactly one of --checkpoint or --predictions")
    os.makedirs(args.out, exist_ok=True)
    if args.predictions is not None:
        try:
            manifest = DatasetManifest.load(args.manifest)
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from exc
        dets = _read_predictions(args.predictions, manifest)
        gts = [it.annotations for it in manifest.items]
    else:
        det, payload = load_detector(args.checkpoint)
        data = load_manifest(args.manifest, det.cfg.input_size, load_masks=False)
        dets, gts = predict(det, data, cfg.eval.batch_size), data.annotations
    doc = evaluate(dets, gts, iou_thr=cfg.eval.iou_threshold, has_occlusion=cfg.eval.has_occlusion)
    doc["meta"] = {"split": os.path.splitext(os.path.basename(args.manifest))[0]}
    path = args.report or os.path.join(args.out, "reports", "eval.json")
    reports.write_report(path, doc, "eval_report")
    if args.plot and doc["curve"] is not None:
        _plot_fppi(doc["curve"], args.plot)
    print(path)
    return EXIT_OK


def cmd_ablate_regions(args, cfg: ExperimentConfig) -> int:
    det, _ = load_detector(args.checkpoint)
    if args.manifest is not None:
        data = load_manifest(args.manifest, det.cfg.input_size)
    else:
        data = load_split(cfg, args.data, args.split)
    if args.variants:
        variants = args.variants
    elif args.table == "regions":
        variants = list(REGION_VARIANTS)
    elif args.table == "ranges":
        variants = list(RANGE_VARIANTS)
    else:
        variants = list(dict.fromkeys([*REGION_VARIANTS, *RANGE_VARIANTS]))
    table = region_table(det, data, variants, FillPolicy(args.fill, cfg.run.seed),
                         pixel_precise=not args.box_foreground, batch_size=cfg.eval.batch_size)
    os.makedirs(os.path.join(args.out, "reports"), exist_ok=True)
    path = os.path.join(args.out, "reports", f"region_table_{args.table}.json")
    reports.write_report(path, table, "region_table")
    md = region_table_markdown(table)
    with open(os.path.splitext(path)[0] + ".md", "w") as f:
        f.write(md)
    sys.stdout.write(md)
    return EXIT_OK


def cmd_vis(args, cfg: ExperimentConfig) -> int:
    ckpts = list(args.checkpoint or [])
    if args.run is not None:
        ckpts += [os.path.join(args.run, "checkpoints", f"{k}.pt") for k in ("initial", "best", "last")]
    if not ckpts:
        raise UsageError("give --checkpoint (repeatable) or --run")
    plots = os.path.join(args.out, "plots")
    os.makedirs(plots, exist_ok=True)
    first, _ = load_detector(ckpts[0])
    data = (load_manifest(args.manifest, first.cfg.input_size, load_masks=False)
            if args.manifest is not None else load_split(cfg, args.data, args.split, load_masks=False))
    indices = args.index or [0]
    for i in indices:
        if not 0 <= i < len(data):
            raise UsageError(f"image index {i} out of range for {len(data)} images")
    written = []
    for path in ckpts:
        det, payload = load_detector(path)
        label = os.path.splitext(os.path.basename(path))[0]
        x = images_to_tensor(data.images[indices])
        with torch.no_grad():
            tap = det(x).tap
        surfaces = [np.asarray(channel_sum_projection(t)) for t in tap]
        for j, i in enumerate(indices):
            out = os.path.join(plots, f"surface_{label}_{i:05d}.png")
            _plot_surface(surfaces[j], f"{label} (image {i})", out)
            written.append(out)
        if "fgm" in payload["modules"] and "bdm" in payload["modules"]:
            acfg = ExperimentConfig.from_dict(payload["config"]).adapt
            bdm, fgm = BackgroundDecoupler(acfg.bdm), FeatureGenerator(acfg.fgm)
            restore(bdm, payload, "bdm")
            restore(fgm, payload, "fgm")
            bdm.eval()
            fgm.eval()
            with torch.no_grad():
                recon = fgm(bdm(tap)).clamp(0, 1).permute(0, 2, 3, 1).numpy()
            for j, i in enumerate(indices):
                out = os.path.join(plots, f"fgm_{label}_{i:05d}.png")
                _plot_pair(data.images[i], recon[j], out)
                written.append(out)
    for w in written:
        print(w)
    return EXIT_OK


def _parse_grid(specs: Sequence[str]) -> dict:
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"grid entry {spec!r} must look like key=v1,v2")
        key, values = spec.split("=", 1)
        grid[key.strip()] = [json.loads(v) if v not in ("average", "black", "white", "random", "target", "source",
                                                         "both") else v for v in values.split(",")]
    return grid


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    grid = dict(SWEEP_PRESETS[args.preset]) if args.preset else {}
    grid.update(_parse_grid(args.grid or []))
    if not grid:
        raise UsageError("sweep needs --preset or --grid")
    if args.epochs is not None:
        cfg = _override(cfg, "adapt", {"epochs": args.epochs})
    if not os.path.exists(args.checkpoint):
        raise CheckpointError(f"source checkpoint not found: {args.checkpoint}")
    run = Run(args.out, cfg)
    try:
        data = _load_all(cfg, args.data)
        det, _ = load_detector(args.checkpoint)
        base = _eval_doc(det, data["target_test"], cfg, "target_test")
        rows = []
        keys = sorted(grid)
        for combo in itertools.product(*(grid[k] for k in keys)):
            overrides = dict(zip(keys, combo))
            name = ",".join(f"{k}={v}" for k, v in overrides.items())
            sub = _override(cfg, "adapt", overrides)
            out = _adapt_once(sub, args.checkpoint, data, run, prefix=f"sweep{len(rows):03d}_")
            best = out["reports"]["best"]
            rows.append({"name": name, "overrides": overrides, "target_mr2": best["mr2"]["reasonable"],
                         "target_ap50": best["ap50"], "best_epoch": out["result"].best_epoch})
            log.info("sweep %s: MR-2 %s", name, best["mr2"]["reasonable"])
        doc = {"baseline": {"target_mr2": base["mr2"]["reasonable"], "target_ap50": base["ap50"]}, "rows": rows}
        path = run.path("reports", "sweep.json")
        reports.write_report(path, doc, "sweep")
        print(path)
    finally:
        run.close()
    return EXIT_OK


# --- plots --------------------------------------------------------------------


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path):
    # fixed metadata so reruns produce identical files
    fig.savefig(path, dpi=80, metadata={"Software": None})
    _plt().close(fig)


def _plot_surface(z: np.ndarray, title: str, path: str) -> None:
    plt = _plt()
    fig = plt.figure(figsize=(4, 3.5))
    ax = fig.add_subplot(projection="3d")
    yy, xx = np.mgrid[: z.shape[0], : z.shape[1]]
    ax.plot_surface(xx, yy, z, cmap="viridis", linewidth=0)
    ax.set_title(title)
    _save(fig, path)


def _plot_pair(img: np.ndarray, recon: np.ndarray, path: str) -> None:
    plt = _plt()
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax, im, t in zip(axes, (img, recon), ("input", "reconstruction")):
        ax.imshow(np.clip(im, 0, 1))
        ax.set_title(t)
        ax.axis("off")
    _save(fig, path)


def _plot_fppi(curve, path: str) -> None:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    fppi = np.maximum(np.asarray(curve["fppi"]), 1e-4)
    ax.loglog(fppi, np.maximum(np.asarray(curve["miss_rate"]), 1e-4), drawstyle="steps-post")
    ax.set_xlabel("false positives per image")
    ax.set_ylabel("miss rate")
    _save(fig, path)


def _plot_losses(history: list[dict], path: str) -> None:
    if not history:
        return
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ep = [h["epoch"] for h in history]
    for k in ("l_det", "l_gen", "l_dis"):
        ax.plot(ep, [h[k] for h in history], marker="o", label=k)
    ax.set_xlabel("epoch")
    ax.legend()
    _save(fig, path)


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="overrides every seed in the config")
    common.add_argument("--out", default="runs/default", help="run / output directory")
    common.add_argument("--device", choices=("cpu", "accelerator"), default="cpu")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bfda", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="render the two-domain synthetic dataset")
    s.add_argument("--size", type=int)
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--fog", type=float)
    s.add_argument("--no-gap-check", action="store_true", help="skip the domain-gap sanity check")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("mask", parents=[common], help="write a masked copy of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--output", required=True, help="output manifest path")
    s.add_argument("--selector", required=True, choices=("foreground", "inner_bg", "outer_bg", "band"))
    s.add_argument("--band", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--fill", default="black", choices=("black", "white", "average", "random"))
    s.add_argument("--box-foreground", action="store_true", help="ignore pixel masks; boxes are foreground")
    s.set_defaults(func=cmd_mask)

    s = sub.add_parser("train-source", parents=[common], help="source-only detector training")
    s.add_argument("--data", help="directory written by `bfda synth` (default: render from config)")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_source)

    def adapt_flags(s):
        s.add_argument("--checkpoint", required=True, help="source-only checkpoint")
        s.add_argument("--data")
        s.add_argument("--epochs", type=int)

    s = sub.add_parser("adapt", parents=[common], help="background-focused adaptation")
    adapt_flags(s)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--fill-policy", choices=("black", "white", "average", "random"))
    s.add_argument("--select-by", choices=("target", "source"))
    s.add_argument("--gen-domains", choices=("both", "source", "target"))
    s.add_argument("--no-bdm", action="store_true")
    s.add_argument("--no-fgm", action="store_true")
    s.add_argument("--no-long", action="store_true", help="drop the long-range discriminator branch")
    s.add_argument("--no-short", action="store_true", help="drop the short-range discriminator branch")
    s.add_argument("--weighted-bands", action="store_true")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", parents=[common], help="MR-2 / AP50 report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--predictions", help='JSON list of {"image", "boxes", "scores"}')
    s.add_argument("--report", help="report path (default <out>/reports/eval.json)")
    s.add_argument("--plot", help="optional FPPI curve image")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate-regions", parents=[common], help="region / range masking table")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest")
    s.add_argument("--data")
    s.add_argument("--split", default="target_test", choices=SPLIT_NAMES)
    s.add_argument("--table", default="both", choices=("regions", "ranges", "both"))
    s.add_argument("--variants", nargs="+")
    s.add_argument("--fill", default="black", choices=("black", "white", "average", "random"))
    s.add_argument("--box-foreground", action="store_true")
    s.set_defaults(func=cmd_ablate_regions)

    s = sub.add_parser("vis", parents=[common], help="channel-sum surfaces and reconstructions")
    s.add_argument("--checkpoint", action="append")
    s.add_argument("--run", help="adaptation run directory (uses its initial/best/last checkpoints)")
    s.add_argument("--manifest")
    s.add_argument("--data")
    s.add_argument("--split", default="target_test", choices=SPLIT_NAMES)
    s.add_argument("--index", type=int, action="append")
    s.set_defaults(func=cmd_vis)

    s = sub.add_parser("sweep", parents=[common], help="grid of adaptation runs")
    adapt_flags(s)
    s.add_argument("--preset", choices=sorted(SWEEP_PRESETS))
    s.add_argument("--grid", action="append", help="key=v1,v2 (adapt settings, dotted for nested)")
    s.set_defaults(func=cmd_sweep)
    return p


CONFIG_ERRORS = (ConfigError, MaskConfigError, SynthConfigError, CheckpointError, UsageError, EvaluationError,
                 FileNotFoundError, ValueError)
RUNTIME_ERRORS = (TrainingError, NonFiniteLossError, DomainGapError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for h in logging.getLogger().handlers:
        h.setLevel(logging.INFO if args.verbose else logging.WARNING)
    logging.getLogger("bfda").setLevel(logging.INFO)  # the run's log.txt always gets INFO
    torch.use_deterministic_algorithms(True)
    try:
        cfg = _configure(args)
        if args.device == "accelerator":
            log.warning("no accelerator backend is wired in; running on CPU")
        return args.func(args, cfg)
    except RUNTIME_ERRORS as exc:
        print(f"bfda: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CONFIG_ERRORS as exc:
        print(f"bfda: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
