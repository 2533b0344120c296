"""Region/range ablation tables and the seeded end-to-end pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .adaptation.trainer import (
    AdaptConfig,
    AdaptResult,
    ProbeConfig,
    decoupled_features,
    probe_accuracy,
    run_adaptation,
    train_probe,
)
from .adaptation.modules import BackgroundDecoupler
from .data import ImageSet, TrainConfig, predict, train_detector
from .datamodel import DomainLabel
from .detector import Detector, DetectorConfig
from .evaluation import evaluate
from .region_ablation import (
    FOREGROUND,
    INNER_BG,
    OUTER_BG,
    FillPolicy,
    MaskConfigError,
    RegionSelector,
    apply_fill,
    build_region_mask,
)
from .synth_data import SynthConfig, generate_samples

log = logging.getLogger(__name__)

# variant name -> selectors whose pixels are replaced
REGION_VARIANTS = {
    "all": (),
    "no_O": (RegionSelector(OUTER_BG),),
    "no_I": (RegionSelector(INNER_BG),),
    "no_F": (RegionSelector(FOREGROUND),),
    "no_I_O": (RegionSelector(INNER_BG), RegionSelector(OUTER_BG)),
}
RANGE_VARIANTS = {
    "all": (),
    "no_1.0_2.0": (RegionSelector.band(1.0, 2.0),),
    "no_1.5_2.5": (RegionSelector.band(1.5, 2.5),),
    "no_2.0_3.0": (RegionSelector.band(2.0, 3.0),),
}


def variant_by_name(name: str):
    if name in REGION_VARIANTS:
        return REGION_VARIANTS[name]
    if name in RANGE_VARIANTS:
        return RANGE_VARIANTS[name]
    if name.startswith("no_"):
        try:
            lo, hi = (float(v) for v in name[3:].split("_"))
        except ValueError:
            raise MaskConfigError(f"unknown ablation variant {name!r}") from None
        return (RegionSelector.band(lo, hi),)
    raise MaskConfigError(f"unknown ablation variant {name!r}")


def masked_images(data: ImageSet, selectors: Sequence[RegionSelector], fill: FillPolicy,
                  pixel_precise: bool = True) -> np.ndarray:
    if not selectors:
        return data.images
    size = (data.size, data.size)
    out = np.empty_like(data.images)
    for i, img in enumerate(data.images):
        masks = None if data.pixel_masks is None else data.pixel_masks[i]
        sel = np.zeros(size, dtype=bool)
        for s in selectors:
            sel |= build_region_mask(size, data.annotations[i], s, masks, pixel_precise)
        out[i] = apply_fill(img, sel, fill, i)
    return out


def region_table(det: Detector, data: ImageSet, variants: Sequence[str], fill: FillPolicy = FillPolicy("black"),
                 pixel_precise: bool = True, batch_size: int = 16) -> dict:
    """Evaluate ``det`` on every masked variant; deltas are relative to the unmasked row."""
    if pixel_precise and data.pixel_masks is None:
        log.warning("no instance pixel masks available; falling back to whole-box foreground")
        pixel_precise = False
    reports = {}
    for name in ["all"] + [v for v in variants if v != "all"]:
        imgs = masked_images(data, variant_by_name(name), fill, pixel_precise)
        reports[name] = evaluate(predict(det, data, batch_size, images=imgs), data.annotations)
    base = reports["all"]
    rows = []
    for name in variants:
        rep = reports[name]
        mr2, ap = rep["mr2"]["reasonable"], rep["ap50"]
        rows.append({
            "variant": name,
            "mr2": mr2,
            "ap50": ap,
            "mr2_subsets": rep["mr2"],
            "delta_mr2": None if mr2 is None or base["mr2"]["reasonable"] is None else mr2 - base["mr2"]["reasonable"],
            "delta_ap50": None if ap is None or base["ap50"] is None else ap - base["ap50"],
        })
    return {"fill": fill.kind, "pixel_precise": pixel_precise, "rows": rows}


def region_table_markdown(table: dict) -> str:
    lines = ["| variant | MR-2 reasonable (%) | bare | partial | heavy | AP50 (%) |",
             "|---|---|---|---|---|---|"]

    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    for r in table["rows"]:
        s = r["mr2_subsets"]
        delta = "" if r["variant"] == "all" or r["delta_ap50"] is None else f" ({100 * r['delta_ap50']:+.1f})"
        lines.append(f"| {r['variant']} | {pct(r['mr2'])} | {pct(s['bare'])} | {pct(s['partial'])} | "
                     f"{pct(s['heavy'])} | {pct(r['ap50'])}{delta} |")
    return "\n".join(lines) + "\n"


# --- seeded pipeline --------------------------------------------------------


@dataclass
class SeedData:
    source_train: ImageSet
    source_test: ImageSet
    target_train: ImageSet
    target_test: ImageSet


def synth_data(cfg: SynthConfig) -> SeedData:
    def load(domain, split):
        return ImageSet.from_samples(generate_samples(cfg, domain, split), f"{domain.tag}_{split}")

    return SeedData(load(DomainLabel.SOURCE, "train"), load(DomainLabel.SOURCE, "test"),
                    load(DomainLabel.TARGET, "train"), load(DomainLabel.TARGET, "test"))


def train_source_only(data: SeedData, det_cfg: DetectorConfig, train_cfg: TrainConfig) -> tuple[Detector, list]:
    torch.manual_seed(train_cfg.seed)
    det = Detector(det_cfg)
    history = train_detector(det, data.source_train, train_cfg)
    return det, history


def load_modules(det: Detector, modules: dict) -> None:
    det.load_state_dict(modules["detector"])


def adapt_from(source_state: dict, data: SeedData, det_cfg: DetectorConfig,
               cfg: AdaptConfig) -> tuple[Detector, AdaptResult, object]:
    det = Detector(det_cfg)
    det.load_state_dict(source_state)
    state, result = run_adaptation(det, data.source_train, data.target_train, cfg, data.target_test, data.source_test)
    return det, result, state


def domain_probe(det: Detector, bdm: Optional[BackgroundDecoupler], data: SeedData, cfg: ProbeConfig) -> float:
    """Held-out accuracy of a freshly trained discriminator on frozen decoupled features."""
    fs, ft = decoupled_features(det, bdm, data.source_train), decoupled_features(det, bdm, data.target_train)
    probe = train_probe(fs, ft, cfg)
    return probe_accuracy(probe, decoupled_features(det, bdm, data.source_test),
                          decoupled_features(det, bdm, data.target_test))
