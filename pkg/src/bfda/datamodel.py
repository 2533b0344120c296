"""Geometric and annotation types shared by every other module.

Boxes are ``(left, top, width, height)`` in continuous pixel coordinates.
Pixel ``(i, j)`` (row, column) belongs to a box when its center
``(j + 0.5, i + 0.5)`` lies in the half-open rectangle ``[x, x+w) x [y, y+h)``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Sequence

import numpy as np


class DomainLabel(IntEnum):
    SOURCE = 0
    TARGET = 1

    @classmethod
    def parse(cls, value) -> "DomainLabel":
        if isinstance(value, DomainLabel):
            return value
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))

    @property
    def tag(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box needs positive width and height, got w={self.w}, h={self.h}")

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    @property
    def cx(self) -> float:
        return self.x + self.w / 2.0

    @property
    def cy(self) -> float:
        return self.y + self.h / 2.0

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_list(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class GTAnnotation:
    box: BBox
    occlusion: float = 0.0
    ignore: bool = False
    domain: DomainLabel = DomainLabel.SOURCE

    def __post_init__(self):
        if not 0.0 <= self.occlusion <= 1.0:
            raise ValueError(f"occlusion must be in [0, 1], got {self.occlusion}")


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0, 1], got {self.score}")


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an ``H x W x 3`` image buffer with values in [0, 1]."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] <= 0 or img.shape[1] <= 0:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return img


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # x2 - x can differ from w in the last bit, so clamp to the valid range
    return min(1.0, inter / (a.area + b.area - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` arrays of xywh boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(ay2[:, None], by2[None]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None] - inter
    return np.where(inter > 0, np.minimum(1.0, inter / np.maximum(union, 1e-12)), 0.0)


def scale_box(b: BBox, factor: float) -> BBox:
    """Scale ``b`` about its center. The result may extend past the image."""
    if not factor > 0:
        raise ValueError(f"scale factor must be positive, got {factor}")
    w, h = b.w * factor, b.h * factor
    return BBox(b.cx - w / 2.0, b.cy - h / 2.0, w, h)


def clip_to_image(b: BBox, width: float, height: float) -> Optional[BBox]:
    """Intersect ``b`` with ``[0, width) x [0, height)``; ``None`` when empty."""
    x1, y1 = max(b.x, 0.0), max(b.y, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x2 <= x1 or y2 <= y1:
        return None
    if (x1, y1, x2, y2) == (b.x, b.y, b.x2, b.y2):
        return b
    return BBox.from_xyxy(x1, y1, x2, y2)


def box_pixel_span(b: BBox, width: int, height: int) -> tuple[slice, slice]:
    """Row and column slices of the pixels whose centers fall inside ``b``."""
    c0 = max(0, math.ceil(b.x - 0.5))
    c1 = min(width, math.ceil(b.x2 - 0.5))
    r0 = max(0, math.ceil(b.y - 0.5))
    r1 = min(height, math.ceil(b.y2 - 0.5))
    return slice(r0, max(r0, r1)), slice(c0, max(c0, c1))


def box_pixel_mask(b: BBox, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[box_pixel_span(b, width, height)] = True
    return mask


@dataclass
class ManifestItem:
    image: str
    domain: DomainLabel
    annotations: list[GTAnnotation] = field(default_factory=list)
    mask: Optional[str] = None

    @property
    def boxes(self) -> list[BBox]:
        return [a.box for a in self.annotations]


@dataclass
class DatasetManifest:
    """A split of images with annotations.

    Paths are stored relative to the manifest file when saved and resolved to
    absolute paths on load.
    """

    split: str
    items: list[ManifestItem] = field(default_factory=list)

    def to_json(self, root: Optional[str] = None) -> dict:
        def rel(p):
            if p is None or root is None:
                return p
            return os.path.relpath(p, root)

        return {
            "split": self.split,
            "items": [
                {
                    "image": rel(it.image),
                    "domain": it.domain.tag,
                    "boxes": [a.box.to_list() for a in it.annotations],
                    "occlusion": [float(a.occlusion) for a in it.annotations],
                    "ignore": [bool(a.ignore) for a in it.annotations],
                    "mask": rel(it.mask),
                }
                for it in self.items
            ],
        }

    @classmethod
    def from_json(cls, doc: dict, root: Optional[str] = None) -> "DatasetManifest":
        def resolve(p):
            if p is None or root is None or os.path.isabs(p):
                return p
            return os.path.normpath(os.path.join(root, p))

        items = []
        for raw in doc["items"]:
            domain = DomainLabel.parse(raw["domain"])
            boxes = raw.get("boxes", [])
            occ = raw.get("occlusion") or [0.0] * len(boxes)
            ign = raw.get("ignore") or [False] * len(boxes)
            if not len(boxes) == len(occ) == len(ign):
                raise ValueError(f"annotation lists disagree in length for {raw['image']}")
            anns = [
                GTAnnotation(BBox(*map(float, b)), float(o), bool(g), domain)
                for b, o, g in zip(boxes, occ, ign)
            ]
            items.append(ManifestItem(resolve(raw["image"]), domain, anns, resolve(raw.get("mask"))))
        return cls(doc["split"], items)

    def save(self, path: str) -> None:
        root = os.path.dirname(os.path.abspath(path))
        with open(path, "w") as f:
            json.dump(self.to_json(root), f, indent=1)

    @classmethod
    def load(cls, path: str, check_files: bool = True) -> "DatasetManifest":
        with open(path) as f:
            doc = json.load(f)
        manifest = cls.from_json(doc, os.path.dirname(os.path.abspath(path)))
        if check_files:
            for it in manifest.items:
                for p in (it.image, it.mask):
                    if p is not None and not os.path.exists(p):
                        raise FileNotFoundError(f"manifest {path} references missing file {p}")
        return manifest


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([b.to_list() for b in boxes], dtype=np.float64)
