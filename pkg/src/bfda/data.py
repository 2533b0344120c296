"""In-memory image sets, source-only training and batched prediction."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .datamodel import BBox, DatasetManifest, Detection, DomainLabel, GTAnnotation, check_image, clip_to_image
from .detector import Detector, images_to_tensor
from .synth_data import SynthSample, instances_from_labels

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a loss turns non-finite; parameters are left at their last good values."""


@dataclass
class ImageSet:
    images: np.ndarray  # (N, S, S, 3) float32 in [0, 1]
    annotations: list[list[GTAnnotation]]
    domain: DomainLabel
    names: list[str] = field(default_factory=list)
    pixel_masks: Optional[list[list[np.ndarray]]] = None  # visible mask per instance

    def __post_init__(self):
        if len(self.images) != len(self.annotations):
            raise ValueError("one annotation list per image required")
        if not self.names:
            self.names = [f"{self.domain.tag}_{i:05d}" for i in range(len(self.images))]

    def __len__(self):
        return len(self.images)

    @property
    def size(self) -> int:
        return int(self.images.shape[1])

    def boxes(self, i: int) -> list[BBox]:
        return [a.box for a in self.annotations[i]]

    def subset(self, idx: Sequence[int]) -> "ImageSet":
        idx = list(idx)
        masks = None if self.pixel_masks is None else [self.pixel_masks[i] for i in idx]
        return ImageSet(self.images[idx], [self.annotations[i] for i in idx], self.domain,
                        [self.names[i] for i in idx], masks)

    @classmethod
    def from_samples(cls, samples: Sequence[SynthSample], prefix: str = "") -> "ImageSet":
        if not samples:
            raise ValueError("empty sample list")
        domain = samples[0].domain
        return cls(
            np.stack([s.image for s in samples]).astype(np.float32),
            [s.annotations() for s in samples],
            domain,
            [f"{prefix or domain.tag}_{i:05d}" for i in range(len(samples))],
            [[inst.visible for inst in s.instances] for s in samples],
        )

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, size: int, load_masks: bool = True) -> "ImageSet":
        """Load and, when needed, resize images to ``size x size``; boxes are rescaled to match."""
        if not manifest.items:
            raise ValueError(f"manifest {manifest.split!r} has no items")
        images, anns, masks, names = [], [], [], []
        have_masks = load_masks and all(it.mask for it in manifest.items)
        for it in manifest.items:
            pil = Image.open(it.image).convert("RGB")
            w0, h0 = pil.size
            sx, sy = size / w0, size / h0
            if (w0, h0) != (size, size):
                pil = pil.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(pil, dtype=np.float32) / 255.0)
            cur = []
            for a in it.annotations:
                b = BBox(a.box.x * sx, a.box.y * sy, a.box.w * sx, a.box.h * sy)
                b = clip_to_image(b, size, size)
                if b is not None:
                    cur.append(GTAnnotation(b, a.occlusion, a.ignore, a.domain))
            anns.append(cur)
            names.append(it.image)
            if have_masks:
                labels = np.asarray(Image.open(it.mask))
                if labels.shape != (size, size):
                    labels = np.asarray(Image.fromarray(labels).resize((size, size), Image.NEAREST))
                masks.append([vis for _, vis in instances_from_labels(labels)][: len(it.annotations)])
        domain = manifest.items[0].domain
        return cls(np.stack(images), anns, domain, names, masks if have_masks else None)


def flip_annotations(anns: Sequence[GTAnnotation], width: int) -> list[GTAnnotation]:
    return [GTAnnotation(BBox(width - a.box.x2, a.box.y, a.box.w, a.box.h), a.occlusion, a.ignore, a.domain)
            for a in anns]


def make_batch(data: ImageSet, idx: Sequence[int], flips: Optional[Sequence[bool]] = None):
    """Tensor batch plus (optionally horizontally flipped) annotations."""
    imgs, anns = [], []
    for k, i in enumerate(idx):
        img, a = data.images[i], data.annotations[i]
        if flips is not None and flips[k]:
            img, a = img[:, ::-1], flip_annotations(a, data.size)
        imgs.append(img)
        anns.append(list(a))
    return images_to_tensor(imgs), anns


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, flip: bool = True):
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, dtype=bool)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size], flips[s:s + batch_size]


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    if total <= 1:
        return lr0
    t = min(step, total - 1) / (total - 1)
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t))


def set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


@dataclass
class TrainConfig:
    epochs: int = 48
    batch_size: int = 8
    lr: float = 1e-3
    lr_min: float = 2e-4
    flip: bool = True
    seed: int = 0


def train_detector(
    det: Detector,
    data: ImageSet,
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Optional[Callable[[int, dict], None]] = None,
) -> list[dict]:
    """Source-only supervised training with Adam and cosine decay; returns per-epoch loss means."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    opt = torch.optim.Adam(det.parameters(), lr=cfg.lr)
    steps_per_epoch = math.ceil(len(data) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    history, step = [], 0
    det.train()
    for epoch in range(cfg.epochs):
        sums = {"l_det": 0.0, "obj": 0.0, "box": 0.0}
        for idx, flips in epoch_batches(len(data), cfg.batch_size, rng, cfg.flip):
            set_lr(opt, cosine_lr(step, total, cfg.lr, cfg.lr_min))
            x, anns = make_batch(data, idx, flips)
            loss = det.loss(det(x), anns)
            if not torch.isfinite(loss.total):
                raise TrainingError(f"non-finite detection loss at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.total.backward()
            opt.step()
            step += 1
            sums["l_det"] += loss.total.item()
            sums["obj"] += loss.obj.item()
            sums["box"] += loss.box.item()
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}}
        history.append(rec)
        log.info("source epoch %d: l_det %.4f", epoch, rec["l_det"])
        if on_epoch is not None:
            on_epoch(epoch, rec)
    return history


@torch.no_grad()
def predict(det: Detector, data: ImageSet, batch_size: int = 16, score_thr: Optional[float] = None,
            apply_nms: bool = True, images: Optional[np.ndarray] = None) -> list[list[Detection]]:
    """Detections for every image of ``data`` (or of ``images`` when given)."""
    was_training = det.training
    det.eval()
    arr = data.images if images is None else images
    out: list[list[Detection]] = []
    for s in range(0, len(arr), batch_size):
        out.extend(det.predict(images_to_tensor(arr[s:s + batch_size]), score_thr, apply_nms))
    det.train(was_training)
    return out


def validate_images(data: ImageSet) -> None:
    for img in data.images:
        check_image(img)
