"""Pedestrian-detection evaluation: greedy matching, FPPI curves, MR-2, AP50.

Detections are matched per image in descending score order (stable on ties)
to the unmatched, non-ignored ground truth of highest IoU.  Detections that
only overlap ignored ground truth are dropped from the counts entirely.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datamodel import BBox, Detection, GTAnnotation, boxes_to_array, iou_matrix

TP, FP, IGNORED = 1, 0, -1
MISS_RATE_FLOOR = 1e-10


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class OcclusionSubset:
    name: str
    occ_lo: float
    occ_hi: float
    lo_inclusive: bool = True
    hi_inclusive: bool = True
    min_height: float = 50.0

    def contains(self, ann: GTAnnotation) -> bool:
        occ = ann.occlusion
        above = occ >= self.occ_lo if self.lo_inclusive else occ > self.occ_lo
        below = occ <= self.occ_hi if self.hi_inclusive else occ < self.occ_hi
        return above and below and ann.box.h >= self.min_height


SUBSETS = {
    "reasonable": OcclusionSubset("reasonable", 0.0, 0.35, True, False),
    "bare": OcclusionSubset("bare", 0.0, 0.10, True, True),
    "partial": OcclusionSubset("partial", 0.10, 0.35, False, True),
    "heavy": OcclusionSubset("heavy", 0.35, 0.80, False, True),
}


@dataclass
class MatchResult:
    scores: np.ndarray  # descending
    labels: np.ndarray  # TP / FP / IGNORED, aligned with scores
    num_gt: int  # non-ignored ground truth
    matched_gt: np.ndarray  # gt index per detection, -1 when unmatched

    @property
    def tp(self) -> int:
        return int((self.labels == TP).sum())

    @property
    def fp(self) -> int:
        return int((self.labels == FP).sum())


@dataclass
class FppiCurve:
    """One point per distinct score threshold, thresholds descending."""

    fppi: np.ndarray
    miss_rate: np.ndarray
    thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.fppi)

    def points(self) -> list[tuple[float, float]]:
        return [(float(f), float(m)) for f, m in zip(self.fppi, self.miss_rate)]


def match_detections(
    dets: Sequence[Detection], gts: Sequence[GTAnnotation], iou_thr: float = 0.5
) -> MatchResult:
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    det_boxes = boxes_to_array([dets[i].box for i in order])
    ignore = np.array([g.ignore for g in gts], dtype=bool)
    overlaps = iou_matrix(det_boxes, boxes_to_array([g.box for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    labels = np.full(len(dets), FP, dtype=np.int64)
    matched = np.full(len(dets), -1, dtype=np.int64)
    for k in range(len(dets)):
        if not len(gts):
            break
        row = overlaps[k]
        free = np.where(~ignore & ~taken & (row >= iou_thr), row, -1.0)
        j = int(np.argmax(free))
        if free[j] >= iou_thr:
            labels[k], matched[k] = TP, j
            taken[j] = True
        elif np.any(ignore & (row >= iou_thr)):
            labels[k] = IGNORED
    return MatchResult(scores, labels, int((~ignore).sum()), matched)


def _pooled(per_image: Sequence[MatchResult]):
    if per_image:
        scores = np.concatenate([m.scores for m in per_image])
        labels = np.concatenate([m.labels for m in per_image])
    else:
        scores, labels = np.zeros(0), np.zeros(0, dtype=np.int64)
    keep = labels != IGNORED
    num_gt = sum(m.num_gt for m in per_image)
    if num_gt == 0:
        raise EvaluationError("no non-ignored ground truth; miss rate is undefined")
    scores, labels = scores[keep], labels[keep]
    order = np.argsort(-scores, kind="stable")
    return scores[order], labels[order], num_gt


def _threshold_counts(scores, labels):
    """Cumulative TP/FP counts at each distinct threshold (descending)."""
    tp_cum = np.cumsum(labels == TP)
    fp_cum = np.cumsum(labels == FP)
    # last index of each run of equal scores
    last = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    return scores[last], tp_cum[last], fp_cum[last]


def fppi_curve(per_image: Sequence[MatchResult], num_images: int) -> FppiCurve:
    if num_images < 1:
        raise ValueError("num_images must be at least 1")
    scores, labels, num_gt = _pooled(per_image)
    if len(scores) == 0:
        return FppiCurve(np.zeros(1), np.ones(1), np.array([np.inf]))
    thr, tp, fp = _threshold_counts(scores, labels)
    return FppiCurve(fp / num_images, 1.0 - tp / num_gt, thr)


def log_avg_miss_rate(
    curve: FppiCurve, num_ref: int = 9, lo: float = -2.0, hi: float = 0.0, floor: float = MISS_RATE_FLOOR
) -> float:
    """Geometric mean of the miss rate sampled at log-spaced FPPI references.

    Each reference takes the miss rate of the largest curve FPPI not above it
    (1.0 when the curve starts beyond the reference).  Zeros are floored
    before the log.
    """
    if len(curve) == 0:
        raise ValueError("empty FPPI curve")
    refs = np.logspace(lo, hi, num_ref)
    samples = np.ones(num_ref)
    for k, ref in enumerate(refs):
        ok = curve.fppi <= ref
        if ok.any():
            # miss rate is non-increasing along the curve, so the last
            # admissible point is the best one
            samples[k] = curve.miss_rate[np.flatnonzero(ok)[-1]]
    return float(np.exp(np.mean(np.log(np.maximum(samples, floor)))))


def average_precision(per_image: Sequence[MatchResult]) -> float:
    """All-points interpolated AP over distinct score thresholds."""
    scores, labels, num_gt = _pooled(per_image)
    if len(scores) == 0:
        return 0.0
    _, tp, fp = _threshold_counts(scores, labels)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def ap50(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence[GTAnnotation]]) -> float:
    matches = [match_detections(d, g, 0.5) for d, g in zip(dets_per_image, gts_per_image)]
    return average_precision(matches)


def filter_subset(gts: Sequence[GTAnnotation], subset: OcclusionSubset) -> list[GTAnnotation]:
    """Mark ground truth outside ``subset`` as ignore; nothing is removed."""
    out = []
    for g in gts:
        if g.ignore or subset.contains(g):
            out.append(g)
        else:
            out.append(GTAnnotation(g.box, g.occlusion, True, g.domain))
    return out


def evaluate(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence[GTAnnotation]],
    subsets: Optional[dict[str, OcclusionSubset]] = None,
    has_occlusion: bool = True,
    iou_thr: float = 0.5,
) -> dict:
    """Full report as a JSON-ready dict (see ``schemas/eval_report.schema.json``).

    Subsets with no eligible ground truth, or occlusion-based subsets when the
    data carries no occlusion labels, are reported as ``null``.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different image counts")
    subsets = SUBSETS if subsets is None else subsets
    num_images = len(gts_per_image)
    mr2: dict[str, Optional[float]] = {}
    curves = {}
    for name, subset in subsets.items():
        if not has_occlusion and name != "reasonable":
            mr2[name] = None
            continue
        gts_sub = [filter_subset(g, subset) for g in gts_per_image]
        matches = [match_detections(d, g, iou_thr) for d, g in zip(dets_per_image, gts_sub)]
        try:
            curve = fppi_curve(matches, num_images)
        except EvaluationError:
            mr2[name] = None
            continue
        mr2[name] = log_avg_miss_rate(curve)
        curves[name] = curve
    full = [match_detections(d, g, iou_thr) for d, g in zip(dets_per_image, gts_per_image)]
    num_gt = sum(m.num_gt for m in full)
    tp = sum(m.tp for m in full)
    fp = sum(m.fp for m in full)
    curve = curves.get("reasonable")
    return {
        "num_images": num_images,
        "mr2": mr2,
        "ap50": average_precision(full) if num_gt else None,
        "counts": {
            "gt": num_gt,
            "det": int(sum(len(d) for d in dets_per_image)),
            "tp": tp,
            "fp": fp,
            "missed": num_gt - tp,
        },
        "curve": None if curve is None else {"fppi": curve.fppi.tolist(), "miss_rate": curve.miss_rate.tolist()},
        "miss_rate_floor": MISS_RATE_FLOOR,
        "iou_threshold": iou_thr,
    }


def reasonable_mr2(report: dict) -> float:
    value = report["mr2"]["reasonable"]
    return math.nan if value is None else value


def detections_from_arrays(boxes: np.ndarray, scores: np.ndarray) -> list[Detection]:
    return [Detection(BBox(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]
