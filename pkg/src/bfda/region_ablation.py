"""Masked-image variants for region and range ablations, plus band weight maps.

A selector picks pixels, a fill policy decides what replaces them.  Bands are
annuli between two center-scaled copies of every instance box; the original box
interiors are never part of a band.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .datamodel import BBox, GTAnnotation, box_pixel_span, check_image, scale_box

FOREGROUND = "foreground"
INNER_BG = "inner_bg"
OUTER_BG = "outer_bg"
BAND = "band"

DEFAULT_BANDS = (
    (1.0, 1.5, 2.0),
    (1.5, 2.0, 1.8),
    (2.0, 2.5, 1.6),
    (2.5, 3.0, 1.4),
    (3.0, 5.0, 1.2),
)


class MaskConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSelector:
    kind: str
    lo: float = 1.0
    hi: float = 2.0

    def __post_init__(self):
        if self.kind not in (FOREGROUND, INNER_BG, OUTER_BG, BAND):
            raise MaskConfigError(f"unknown region selector {self.kind!r}")
        if self.kind == BAND and not 1.0 <= self.lo < self.hi:
            raise MaskConfigError(f"band needs 1.0 <= lo < hi, got ({self.lo}, {self.hi})")

    @classmethod
    def band(cls, lo: float, hi: float) -> "RegionSelector":
        return cls(BAND, lo, hi)

    @property
    def name(self) -> str:
        if self.kind == BAND:
            return f"no_{self.lo:.1f}_{self.hi:.1f}"
        return self.kind


@dataclass(frozen=True)
class FillPolicy:
    kind: str = "average"
    seed: int = 0
    rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("black", "white", "average", "random", "constant"):
            raise MaskConfigError(f"unknown fill policy {self.kind!r}")

    def color(self, img: np.ndarray, image_index: int = 0) -> np.ndarray:
        if self.kind == "black":
            return np.zeros(3)
        if self.kind == "white":
            return np.ones(3)
        if self.kind == "average":
            # over all pixels, before anything is replaced
            return img.reshape(-1, 3).mean(axis=0)
        if self.kind == "random":
            rng = np.random.default_rng([self.seed, image_index])
            return rng.integers(0, 256, size=3) / 255.0
        return np.asarray(self.rgb, dtype=np.float64)


def union_box_mask(size: tuple[int, int], boxes: Sequence[BBox]) -> np.ndarray:
    h, w = size
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        mask[box_pixel_span(b, w, h)] = True
    return mask


def _scaled_union(size, boxes, factor) -> np.ndarray:
    if factor == 1.0:
        return union_box_mask(size, boxes)
    return union_box_mask(size, [scale_box(b, factor) for b in boxes])


def _band_mask(size, boxes, lo, hi) -> np.ndarray:
    # A pixel's range is set by its nearest instance, so bands never overlap
    # and adjacent bands tile exactly even when instances crowd together.
    inner = _scaled_union(size, boxes, lo) | union_box_mask(size, boxes)
    return _scaled_union(size, boxes, hi) & ~inner


def foreground_mask(size, annotations, pixel_masks: Optional[Sequence[np.ndarray]]) -> np.ndarray:
    boxes = [a.box for a in annotations]
    if pixel_masks is None:
        return union_box_mask(size, boxes)
    if len(pixel_masks) != len(annotations):
        raise MaskConfigError("need exactly one pixel mask per annotation")
    fg = np.zeros(size, dtype=bool)
    for b, m in zip(boxes, pixel_masks):
        if m.shape != tuple(size):
            raise MaskConfigError(f"pixel mask shape {m.shape} != image size {size}")
        fg |= m & union_box_mask(size, [b])
    return fg


def build_region_mask(
    size: tuple[int, int],
    annotations: Sequence[GTAnnotation],
    sel: RegionSelector,
    pixel_masks: Optional[Sequence[np.ndarray]] = None,
    pixel_precise: bool = True,
) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixels selected for replacement.

    Without ``pixel_precise`` the whole box counts as foreground, which leaves
    the inner-box background empty.
    """
    boxes = [a.box for a in annotations]
    if sel.kind == OUTER_BG:
        return ~union_box_mask(size, boxes)
    if sel.kind == BAND:
        return _band_mask(size, boxes, sel.lo, sel.hi)
    if pixel_precise and pixel_masks is None and annotations:
        raise MaskConfigError(f"selector {sel.kind!r} needs instance pixel masks in pixel-precise mode")
    fg = foreground_mask(size, annotations, pixel_masks if pixel_precise else None)
    if sel.kind == FOREGROUND:
        return fg
    return union_box_mask(size, boxes) & ~fg


def apply_fill(img: np.ndarray, mask: np.ndarray, policy: FillPolicy, image_index: int = 0) -> np.ndarray:
    img = check_image(img)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape[:2]}")
    out = img.copy()
    if mask.any():
        out[mask] = policy.color(img, image_index).astype(img.dtype)
    return out


def band_weight_map(
    size: tuple[int, int],
    boxes: Sequence[BBox],
    bands: Sequence[tuple[float, float, float]] = DEFAULT_BANDS,
) -> np.ndarray:
    """Per-pixel weights: each band's weight inside its annulus, 1.0 elsewhere.

    Where annuli of different boxes overlap the innermost band wins (the
    largest weight for the default, outward-decreasing bands).  Pixels inside
    any original box stay at 1.0.
    """
    ordered = sorted(bands)
    for lo, hi, wt in ordered:
        if not 1.0 <= lo < hi or wt < 0:
            raise MaskConfigError(f"invalid band ({lo}, {hi}, {wt})")
    for (lo0, hi0, _), (lo1, _, _) in zip(ordered, ordered[1:]):
        if lo1 < hi0:
            raise MaskConfigError(f"bands ({lo0}, {hi0}) and ({lo1}, ...) overlap")
    h, w = size
    weights = np.ones((h, w), dtype=np.float64)
    if not boxes:
        return weights
    for lo, hi, wt in ordered:
        weights[_band_mask(size, boxes, lo, hi)] = wt
    return weights
