"""Deterministic two-domain synthetic pedestrian datasets.

Source and target differ only in their backgrounds (base colour, noise
spectrum, optional fog); pedestrians are drawn from the same distribution in
both.  Each pedestrian stands on a cast ground shadow, and some images contain
shadowless look-alike figures that are not annotated, so telling people from
look-alikes needs the background right next to them.

Instance masks are written as one 8-bit label PNG per image: value ``k + 1``
marks visible pixels of instance ``k``, ``128 + k + 1`` marks its occluded
pixels.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from PIL import Image

from .datamodel import BBox, DatasetManifest, DomainLabel, GTAnnotation, ManifestItem

FOG_COLOR = np.array([0.8, 0.8, 0.8])
OCCLUDED_BIT = 128
SPLITS = ("train", "test")


class SynthConfigError(ValueError):
    pass


class DomainGapError(RuntimeError):
    pass


@dataclass
class BackgroundSpec:
    base_color: tuple[float, float, float]
    noise_grid: int  # coarse noise lattice size; larger means higher spatial frequency
    noise_amp: float
    grain_amp: float  # per-pixel noise
    gradient: float  # top-to-bottom brightness drop

    def __post_init__(self):
        self.base_color = tuple(float(c) for c in self.base_color)


def _source_bg() -> BackgroundSpec:
    return BackgroundSpec((0.42, 0.46, 0.52), 4, 0.10, 0.01, 0.12)


def _target_bg() -> BackgroundSpec:
    return BackgroundSpec((0.56, 0.50, 0.38), 24, 0.08, 0.04, 0.04)


@dataclass
class SynthConfig:
    size: int = 192
    n_train: int = 160
    n_test: int = 80
    min_instances: int = 1
    max_instances: int = 4
    min_height: int = 40
    max_height: int = 110
    source_bg: BackgroundSpec = field(default_factory=_source_bg)
    target_bg: BackgroundSpec = field(default_factory=_target_bg)
    fog: float = 0.0  # applied to the target domain only
    occlusion_rate: float = 0.35
    max_distractors: int = 2
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.source_bg, dict):
            self.source_bg = BackgroundSpec(**self.source_bg)
        if isinstance(self.target_bg, dict):
            self.target_bg = BackgroundSpec(**self.target_bg)
        if self.min_instances > self.max_instances:
            raise SynthConfigError("min_instances exceeds max_instances")
        if self.min_height > self.max_height:
            raise SynthConfigError("min_height exceeds max_height")
        if self.min_instances < 0 or self.min_height < 8:
            raise SynthConfigError("instance counts must be >= 0 and heights >= 8 px")
        if self.max_height > self.size - 4:
            raise SynthConfigError("pedestrians taller than the image")
        if not 0.0 <= self.fog <= 1.0:
            raise SynthConfigError("fog density must be in [0, 1]")
        if self.max_instances + self.max_distractors > 126:
            raise SynthConfigError("too many figures per image for an 8-bit label mask")

    def background(self, domain: DomainLabel) -> BackgroundSpec:
        return self.source_bg if domain == DomainLabel.SOURCE else self.target_bg

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SynthInstance:
    box: BBox
    mask: np.ndarray  # full figure, bool (H, W)
    visible: np.ndarray  # bool (H, W)

    @property
    def occlusion(self) -> float:
        total = int(self.mask.sum())
        return (total - int(self.visible.sum())) / total


@dataclass
class SynthSample:
    image: np.ndarray  # float (H, W, 3) in [0, 1]
    instances: list[SynthInstance]
    label_mask: np.ndarray  # uint8 (H, W)
    domain: DomainLabel

    def annotations(self) -> list[GTAnnotation]:
        return [GTAnnotation(inst.box, inst.occlusion, False, self.domain) for inst in self.instances]


def fog_transform(img: np.ndarray, density: float) -> np.ndarray:
    if not 0.0 <= density <= 1.0:
        raise ValueError("fog density must be in [0, 1]")
    return (1.0 - density) * img + density * FOG_COLOR


def _smooth_noise(rng: np.random.Generator, grid: int, size: int) -> np.ndarray:
    coarse = rng.standard_normal((grid + 1, grid + 1)).astype(np.float32)
    up = Image.fromarray(coarse, mode="F").resize((size, size), Image.BICUBIC)
    return np.asarray(up, dtype=np.float64)


def render_background(spec: BackgroundSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    shared = _smooth_noise(rng, spec.noise_grid, size)
    tint = np.stack([_smooth_noise(rng, spec.noise_grid, size) for _ in range(3)], axis=-1)
    ramp = np.linspace(spec.gradient / 2, -spec.gradient / 2, size)[:, None, None]
    img = np.asarray(spec.base_color) + spec.noise_amp * (0.7 * shared[..., None] + 0.3 * tint) + ramp
    img = img + spec.grain_amp * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _figure(rng: np.random.Generator, cfg: SynthConfig):
    """Sample one figure's geometry and colours (no placement)."""
    h = int(rng.integers(cfg.min_height, cfg.max_height + 1))
    w = max(4, int(round(h * rng.uniform(0.36, 0.46))))
    colors = {
        "head": rng.uniform(0.25, 0.95, 3),
        "torso": rng.uniform(0.03, 0.97, 3),
        "legs": rng.uniform(0.03, 0.97, 3),
    }
    stride = rng.uniform(-0.12, 0.12)
    return h, w, colors, stride


def _draw_figure(yy, xx, top, left, h, w, stride):
    """Boolean part masks of a figure whose layout box is (left, top, w, h)."""
    cx = left + w / 2.0
    head = _ellipse(yy, xx, top + 0.10 * h, cx, 0.10 * h, 0.25 * w)
    torso = (yy >= top + 0.18 * h) & (yy < top + 0.58 * h) & (xx >= left) & (xx < left + w)
    legs_y = (yy >= top + 0.56 * h) & (yy < top + h)
    left_leg = legs_y & (xx >= cx - (0.45 - stride) * w) & (xx < cx - (0.05 - stride) * w)
    right_leg = legs_y & (xx >= cx + (0.05 + stride) * w) & (xx < cx + (0.45 + stride) * w)
    return head, torso, left_leg | right_leg


def _overlaps(box, placed, margin):
    x, y, w, h = box
    for px, py, pw, ph in placed:
        if x < px + pw + margin and px < x + w + margin and y < py + ph + margin and py < y + h + margin:
            return True
    return False


def render_sample(cfg: SynthConfig, domain: DomainLabel, split: str, index: int) -> SynthSample:
    split_id = SPLITS.index(split)
    bg_rng = np.random.default_rng([cfg.seed, split_id, int(domain), index, 0])
    fg_rng = np.random.default_rng([cfg.seed, split_id, int(domain), index, 1])
    s = cfg.size
    yy, xx = np.mgrid[0:s, 0:s]
    img = render_background(cfg.background(domain), s, bg_rng)

    n_people = int(fg_rng.integers(cfg.min_instances, cfg.max_instances + 1))
    n_fake = int(fg_rng.integers(0, cfg.max_distractors + 1))
    placed, figures = [], []
    for k in range(n_people + n_fake):
        h, w, colors, stride = _figure(fg_rng, cfg)
        for _ in range(50):
            left = int(fg_rng.integers(2, s - w - 1))
            top = int(fg_rng.integers(2, s - h - 1))
            if not _overlaps((left, top, w, h), placed, 3):
                break
        else:
            continue
        placed.append((left, top, w, h))
        figures.append((k < n_people, left, top, h, w, colors, stride, fg_rng.choice([-1.0, 1.0])))

    # shadows go in first so that every figure stands on top of them
    for real, left, top, h, w, _, _, side in figures:
        if real:
            shadow = _ellipse(yy, xx, top + h - 0.01 * h, left + w / 2 + side * 0.22 * h, 0.06 * h, 0.45 * h)
            img[shadow] *= 0.45

    instances = []
    labels = np.zeros((s, s), dtype=np.uint8)
    for real, left, top, h, w, colors, stride, _ in figures:
        head, torso, legs = _draw_figure(yy, xx, top, left, h, w, stride)
        img[legs] = colors["legs"]
        img[torso] = colors["torso"]
        img[head] = colors["head"]
        if not real:
            continue
        mask = head | torso | legs
        rows, cols = np.flatnonzero(mask.any(axis=1)), np.flatnonzero(mask.any(axis=0))
        box = BBox(float(cols[0]), float(rows[0]), float(cols[-1] - cols[0] + 1), float(rows[-1] - rows[0] + 1))
        visible = mask.copy()
        if fg_rng.uniform() < cfg.occlusion_rate:
            frac = fg_rng.uniform(0.1, 0.8)
            bx, by, bw, bh = int(box.x), int(box.y), int(box.w), int(box.h)
            if fg_rng.uniform() < 0.6:
                occ = (yy >= by + int(round((1 - frac) * bh))) & (yy < by + bh) & (xx >= bx - 2) & (xx < bx + bw + 2)
            else:
                cut = int(round(frac * bw))
                occ = (yy >= by - 2) & (yy < by + bh + 2)
                occ &= (xx >= bx - 2) & (xx < bx + cut) if fg_rng.uniform() < 0.5 else (xx >= bx + bw - cut) & (xx < bx + bw + 2)
            occ_color = np.clip(img[occ & ~mask].mean(axis=0) * 0.85 if (occ & ~mask).any() else img[occ].mean(axis=0), 0, 1)
            img[occ] = occ_color
            visible &= ~occ
            if not visible.any():
                continue
        k = len(instances) + 1
        labels[mask] = k + OCCLUDED_BIT
        labels[visible] = k
        instances.append(SynthInstance(box, mask, visible))

    if domain == DomainLabel.TARGET and cfg.fog > 0:
        img = fog_transform(img, cfg.fog)
    # quantise like the PNG round trip so in-memory and on-disk data agree
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return SynthSample(img, instances, labels, domain)


def instances_from_labels(labels: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(full_mask, visible_mask)`` per instance, recovered from a label PNG."""
    ids = labels & (OCCLUDED_BIT - 1)
    n = int(ids.max()) if ids.size else 0
    return [((ids == k), (labels == k)) for k in range(1, n + 1)]


def _hist_features(pixels: np.ndarray, bins: int = 8) -> np.ndarray:
    feats = [np.histogram(pixels[:, c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)]
    f = np.concatenate(feats).astype(np.float64)
    return f / max(1.0, f.sum())


def histogram_domain_accuracy(src_feats: list[np.ndarray], tgt_feats: list[np.ndarray]) -> float:
    """Nearest-centroid colour-histogram classifier; even indices fit, odd indices score."""
    src, tgt = np.array(src_feats), np.array(tgt_feats)
    c_src, c_tgt = src[0::2].mean(axis=0), tgt[0::2].mean(axis=0)
    correct, total = 0, 0
    for feats, is_src in ((src[1::2], True), (tgt[1::2], False)):
        d_src = np.abs(feats - c_src).sum(axis=1)
        d_tgt = np.abs(feats - c_tgt).sum(axis=1)
        correct += int(((d_src < d_tgt) == is_src).sum())
        total += len(feats)
    return correct / max(1, total)


def domain_gap_report(src: list[SynthSample], tgt: list[SynthSample]) -> dict:
    def bg(sample):
        return _hist_features(sample.image[sample.label_mask == 0])

    def fg(sample):
        vis = (sample.label_mask > 0) & (sample.label_mask < OCCLUDED_BIT)
        return _hist_features(sample.image[vis])

    src_fg = [s for s in src if s.instances]
    tgt_fg = [s for s in tgt if s.instances]
    n = min(len(src_fg), len(tgt_fg))
    return {
        "background_accuracy": histogram_domain_accuracy([bg(s) for s in src], [bg(s) for s in tgt]),
        "foreground_accuracy": histogram_domain_accuracy([fg(s) for s in src_fg[:n]], [fg(s) for s in tgt_fg[:n]]),
    }


def check_domain_gap(report: dict, fog: float) -> None:
    if report["background_accuracy"] <= 0.95:
        raise DomainGapError(f"backgrounds not separable enough: {report['background_accuracy']:.3f}")
    # fog recolours people as well, so foreground parity only holds without it
    if fog == 0 and report["foreground_accuracy"] >= 0.60:
        raise DomainGapError(f"foregrounds separable across domains: {report['foreground_accuracy']:.3f}")


def generate_samples(cfg: SynthConfig, domain: DomainLabel, split: str, count: Optional[int] = None) -> list[SynthSample]:
    n = (cfg.n_train if split == "train" else cfg.n_test) if count is None else count
    return [render_sample(cfg, domain, split, i) for i in range(n)]


def _save_png(path: str, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def generate_dataset(cfg: SynthConfig, out_dir: str, check_gap: bool = True) -> dict[str, str]:
    """Write images, label masks and four manifests; returns ``{"source_train": path, ...}``."""
    os.makedirs(out_dir, exist_ok=True)
    paths, train_samples = {}, {}
    for domain in (DomainLabel.SOURCE, DomainLabel.TARGET):
        for split in SPLITS:
            name = f"{domain.tag}_{split}"
            img_dir = os.path.join(out_dir, name)
            os.makedirs(img_dir, exist_ok=True)
            samples = generate_samples(cfg, domain, split)
            if split == "train":
                train_samples[domain] = samples
            items = []
            for i, sample in enumerate(samples):
                img_path = os.path.join(img_dir, f"{i:05d}.png")
                mask_path = os.path.join(img_dir, f"{i:05d}_mask.png")
                _save_png(img_path, np.round(sample.image * 255).astype(np.uint8))
                _save_png(mask_path, sample.label_mask)
                items.append(ManifestItem(img_path, domain, sample.annotations(), mask_path))
            manifest_path = os.path.join(out_dir, f"{name}.json")
            DatasetManifest(name, items).save(manifest_path)
            paths[name] = manifest_path
    report = domain_gap_report(train_samples[DomainLabel.SOURCE], train_samples[DomainLabel.TARGET])
    with open(os.path.join(out_dir, "synth_config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "domain_gap.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    if check_gap:
        check_domain_gap(report, cfg.fog)
    return paths
