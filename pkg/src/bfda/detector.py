"""Miniature single-class, anchor-based one-stage detector.

Structure mirrors a YOLO-style model at toy scale: strided residual backbone,
top-down feature fusion, and one head per scale.  The output of each head's
first convolution is exposed, since the adaptation modules tap the
highest-resolution one.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import BBox, Detection, GTAnnotation, iou_matrix


@dataclass
class DetectorConfig:
    input_size: int = 192
    strides: tuple[int, ...] = (8, 16, 32)
    channels: tuple[int, ...] = (32, 48, 64)
    stem_channels: int = 16
    head_channels: int = 32
    anchor_sizes: tuple[float, ...] = (20.0, 40.0, 80.0)
    aspect_ratios: tuple[float, ...] = (0.3, 0.41, 0.6)  # width / height
    score_thr: float = 0.01
    nms_iou: float = 0.5
    pre_nms_topk: int = 1000
    max_det: int = 100
    pos_iou: float = 0.5
    obj_weight: float = 1.0
    box_weight: float = 1.0
    max_log_scale: float = 4.0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channels = tuple(int(c) for c in self.channels)
        self.anchor_sizes = tuple(float(a) for a in self.anchor_sizes)
        self.aspect_ratios = tuple(float(r) for r in self.aspect_ratios)
        s0 = self.strides[0]
        if s0 < 2 or s0 & (s0 - 1):
            raise ValueError(f"strides must be powers of two, got {self.strides}")
        for a, b in zip(self.strides, self.strides[1:]):
            if b != 2 * a:
                raise ValueError(f"consecutive strides must double, got {self.strides}")
        if not len(self.strides) == len(self.channels) == len(self.anchor_sizes):
            raise ValueError("strides, channels and anchor_sizes need one entry per scale")
        if min(self.anchor_sizes) <= 0 or min(self.aspect_ratios) <= 0:
            raise ValueError("anchors must be positive")
        if self.input_size % self.strides[-1]:
            raise ValueError("input size must be divisible by the coarsest stride")

    @property
    def num_anchors(self) -> int:
        return len(self.aspect_ratios)

    @property
    def grid_sizes(self) -> list[int]:
        return [self.input_size // s for s in self.strides]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def conv_act(cin: int, cout: int, k: int = 3, s: int = 1, norm: bool = False) -> nn.Sequential:
    """Conv + SiLU, optionally with GroupNorm (per-sample, so no cross-domain batch statistics)."""
    if not norm:
        return nn.Sequential(nn.Conv2d(cin, cout, k, s, k // 2), nn.SiLU())
    return nn.Sequential(nn.Conv2d(cin, cout, k, s, k // 2, bias=False), nn.GroupNorm(_groups(cout), cout), nn.SiLU())


def _groups(ch: int) -> int:
    for g in (8, 4, 2):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, ch: int, norm: bool = False):
        super().__init__()
        tail = [nn.Conv2d(ch, ch, 3, 1, 1, bias=not norm)] + ([nn.GroupNorm(_groups(ch), ch)] if norm else [])
        self.body = nn.Sequential(conv_act(ch, ch, norm=norm), *tail)

    def forward(self, x):
        return F.silu(x + self.body(x))


@dataclass
class DetectorOutput:
    features: list[torch.Tensor]  # first head conv per scale, index 0 finest
    head: list[torch.Tensor]  # (B, A, H, W, 5): objectness logit, tx, ty, tw, th

    @property
    def tap(self) -> torch.Tensor:
        return self.features[0]


@dataclass
class DetLoss:
    obj: torch.Tensor
    box: torch.Tensor
    total: torch.Tensor
    num_pos: int = 0


class Detector(nn.Module):
    def __init__(self, cfg: Optional[DetectorConfig] = None):
        super().__init__()
        self.cfg = cfg = cfg or DetectorConfig()
        stem = []
        cin = 3
        n_down = int(math.log2(cfg.strides[0]))
        for k in range(n_down):
            cout = cfg.channels[0] if k == n_down - 1 else cfg.stem_channels
            # the first conv sees raw colour and stays unnormalised so that per-image
            # colour statistics survive into the features
            stem.append(conv_act(cin, cout, 3, 2, norm=k > 0))
            cin = cout
        stem.append(ResBlock(cfg.channels[0], norm=True))
        self.stages = nn.ModuleList([nn.Sequential(*stem)])
        for c_prev, c in zip(cfg.channels, cfg.channels[1:]):
            self.stages.append(nn.Sequential(conv_act(c_prev, c, 3, 2, norm=True), ResBlock(c, norm=True)))
        self.top_down = nn.ModuleList(
            [nn.Conv2d(c_hi, c_lo, 1) for c_lo, c_hi in zip(cfg.channels, cfg.channels[1:])]
        )
        # head convs (the tap) are unnormalised for the same reason
        self.head_convs = nn.ModuleList([conv_act(c, cfg.head_channels) for c in cfg.channels])
        self.head_preds = nn.ModuleList([nn.Conv2d(cfg.head_channels, cfg.num_anchors * 5, 1) for _ in cfg.channels])
        prior = -math.log((1 - 0.01) / 0.01)
        for pred in self.head_preds:
            nn.init.normal_(pred.weight, std=0.01)
            with torch.no_grad():
                pred.bias.zero_()
                pred.bias.view(cfg.num_anchors, 5)[:, 0] = prior
        self._anchor_cache: dict = {}

    def forward(self, x: torch.Tensor) -> DetectorOutput:
        s = self.cfg.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input of shape (B, 3, {s}, {s}), got {tuple(x.shape)}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        for i in range(len(feats) - 2, -1, -1):
            up = F.interpolate(self.top_down[i](feats[i + 1]), scale_factor=2, mode="nearest")
            feats[i] = feats[i] + up
        taps, heads = [], []
        a = self.cfg.num_anchors
        for f, conv, pred in zip(feats, self.head_convs, self.head_preds):
            t = conv(f)
            taps.append(t)
            o = pred(t)
            b, _, h, w = o.shape
            heads.append(o.view(b, a, 5, h, w).permute(0, 1, 3, 4, 2))
        return DetectorOutput(taps, heads)

    def anchors(self, dtype=torch.float32) -> list[torch.Tensor]:
        key = dtype
        if key not in self._anchor_cache:
            self._anchor_cache[key] = make_anchors(self.cfg, dtype)
        return self._anchor_cache[key]

    def loss(self, out: DetectorOutput, gts_per_image: Sequence[Sequence[GTAnnotation]]) -> DetLoss:
        return detection_loss(out.head, self.anchors(out.head[0].dtype), gts_per_image, self.cfg)

    @torch.no_grad()
    def predict(self, x: torch.Tensor, score_thr: Optional[float] = None, apply_nms: bool = True) -> list[list[Detection]]:
        out = self(x)
        thr = self.cfg.score_thr if score_thr is None else score_thr
        results = []
        for b in range(x.shape[0]):
            boxes, scores = decode_arrays([h[b] for h in out.head], self.anchors(out.head[0].dtype), self.cfg, thr)
            if apply_nms:
                keep = nms_indices(boxes, scores, self.cfg.nms_iou)[: self.cfg.max_det]
                boxes, scores = boxes[keep], scores[keep]
            results.append([Detection(BBox(*map(float, bx)), float(sc)) for bx, sc in zip(boxes, scores)])
        return results


def make_anchors(cfg: DetectorConfig, dtype=torch.float32) -> list[torch.Tensor]:
    """Per scale, an ``(A, H, W, 4)`` tensor of anchor (cx, cy, w, h)."""
    out = []
    for stride, size, g in zip(cfg.strides, cfg.anchor_sizes, cfg.grid_sizes):
        centers = (torch.arange(g, dtype=dtype) + 0.5) * stride
        cy, cx = torch.meshgrid(centers, centers, indexing="ij")
        per_ratio = []
        for r in cfg.aspect_ratios:
            w = torch.full_like(cx, size * math.sqrt(r))
            h = torch.full_like(cx, size / math.sqrt(r))
            per_ratio.append(torch.stack([cx, cy, w, h], dim=-1))
        out.append(torch.stack(per_ratio))
    return out


def _flatten(per_scale: Sequence[torch.Tensor], last: int) -> torch.Tensor:
    return torch.cat([t.reshape(*t.shape[: t.dim() - 4], -1, last) for t in per_scale], dim=-2)


def decode_boxes(offsets: torch.Tensor, anchors: torch.Tensor, max_log_scale: float = 4.0) -> torch.Tensor:
    """Offsets ``(tx, ty, tw, th)`` relative to anchors ``(cx, cy, w, h)`` -> xywh boxes."""
    cx = anchors[..., 0] + offsets[..., 0] * anchors[..., 2]
    cy = anchors[..., 1] + offsets[..., 1] * anchors[..., 3]
    w = anchors[..., 2] * torch.exp(offsets[..., 2].clamp(max=max_log_scale))
    h = anchors[..., 3] * torch.exp(offsets[..., 3].clamp(max=max_log_scale))
    return torch.stack([cx - w / 2, cy - h / 2, w, h], dim=-1)


def encode_boxes(boxes: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    cx = boxes[..., 0] + boxes[..., 2] / 2
    cy = boxes[..., 1] + boxes[..., 3] / 2
    return torch.stack(
        [
            (cx - anchors[..., 0]) / anchors[..., 2],
            (cy - anchors[..., 1]) / anchors[..., 3],
            torch.log(boxes[..., 2] / anchors[..., 2]),
            torch.log(boxes[..., 3] / anchors[..., 3]),
        ],
        dim=-1,
    )


def box_iou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise IoU of two aligned ``(..., 4)`` xywh tensors; differentiable."""
    iw = (torch.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0)
    ih = (torch.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - torch.maximum(a[..., 1], b[..., 1])).clamp(min=0)
    inter = iw * ih
    return inter / (a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter)


def assign_anchors(anchor_xywh: np.ndarray, gts: Sequence[GTAnnotation], pos_iou: float = 0.5):
    """Anchor labels for one image: ``(gt_index, negative)`` arrays.

    Positives are every anchor with IoU >= ``pos_iou`` against some GT plus the
    best anchor of each GT.  Anchors overlapping ignored GT at ``pos_iou``
    are neither positive nor negative.
    """
    n = len(anchor_xywh)
    gt_idx = np.full(n, -1, dtype=np.int64)
    negative = np.ones(n, dtype=bool)
    keep = [g for g in gts if not g.ignore]
    ignored = [g for g in gts if g.ignore]
    if ignored:
        ov = iou_matrix(anchor_xywh, np.array([g.box.to_list() for g in ignored]))
        negative &= ov.max(axis=1) < pos_iou
    if keep:
        ov = iou_matrix(anchor_xywh, np.array([g.box.to_list() for g in keep]))
        best_gt = ov.argmax(axis=1)
        pos = ov[np.arange(n), best_gt] >= pos_iou
        gt_idx[pos] = best_gt[pos]
        for j in range(len(keep)):
            gt_idx[int(ov[:, j].argmax())] = j
        negative &= gt_idx < 0
    return gt_idx, negative, keep


def detection_loss(
    head: Sequence[torch.Tensor],
    anchors: Sequence[torch.Tensor],
    gts_per_image: Sequence[Sequence[GTAnnotation]],
    cfg: DetectorConfig,
) -> DetLoss:
    """Objectness BCE over all anchors plus mean (1 - IoU) over positives.

    The objectness sum is normalised by the number of positive anchors in the
    batch (at least one).
    """
    pred = _flatten(head, 5)  # (B, N, 5)
    anc = _flatten(anchors, 4)  # (N, 4)
    anc_np = anc.detach().cpu().double().numpy()
    anc_xywh = np.concatenate([anc_np[:, :2] - anc_np[:, 2:] / 2, anc_np[:, 2:]], axis=1)
    obj_target = torch.zeros(pred.shape[:2], dtype=pred.dtype)
    obj_valid = torch.zeros(pred.shape[:2], dtype=pred.dtype)
    pos_b, pos_n, pos_boxes = [], [], []
    for b, gts in enumerate(gts_per_image):
        gt_idx, negative, keep = assign_anchors(anc_xywh, gts, cfg.pos_iou)
        pos = np.flatnonzero(gt_idx >= 0)
        obj_target[b, pos] = 1.0
        obj_valid[b, pos] = 1.0
        obj_valid[b, torch.from_numpy(negative)] = 1.0
        for n in pos:
            pos_b.append(b)
            pos_n.append(int(n))
            pos_boxes.append(keep[gt_idx[n]].box.to_list())
    num_pos = len(pos_b)
    bce = F.binary_cross_entropy_with_logits(pred[..., 0], obj_target, reduction="none")
    obj = (bce * obj_valid).sum() / max(1, num_pos)
    if num_pos:
        sel = pred[pos_b, pos_n, 1:]
        decoded = decode_boxes(sel, anc[pos_n], cfg.max_log_scale)
        target = torch.tensor(pos_boxes, dtype=pred.dtype)
        box = (1.0 - box_iou_pairs(decoded, target)).mean()
    else:
        box = pred.sum() * 0.0
    total = cfg.obj_weight * obj + cfg.box_weight * box
    return DetLoss(obj, box, total, num_pos)


def decode_arrays(head_one: Sequence[torch.Tensor], anchors: Sequence[torch.Tensor], cfg: DetectorConfig, score_thr: float):
    """Decode one image's head outputs into clipped ``(N, 4)`` xywh boxes and scores."""
    pred = _flatten(head_one, 5)
    anc = _flatten(anchors, 4)
    scores = torch.sigmoid(pred[:, 0])
    keep = torch.nonzero(scores > score_thr).flatten()
    if len(keep) > cfg.pre_nms_topk:
        top = torch.argsort(scores[keep], descending=True, stable=True)[: cfg.pre_nms_topk]
        keep = keep[top]
    boxes = decode_boxes(pred[keep, 1:], anc[keep], cfg.max_log_scale).double().numpy()
    scores = scores[keep].double().numpy()
    s = float(cfg.input_size)
    x1 = np.clip(boxes[:, 0], 0, s)
    y1 = np.clip(boxes[:, 1], 0, s)
    x2 = np.clip(boxes[:, 0] + boxes[:, 2], 0, s)
    y2 = np.clip(boxes[:, 1] + boxes[:, 3], 0, s)
    ok = (x2 > x1) & (y2 > y1)
    out = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)[ok]
    return out, np.clip(scores[ok], 0.0, 1.0)


def decode(head_one: Sequence[torch.Tensor], anchors: Sequence[torch.Tensor], cfg: DetectorConfig, score_thr: float) -> list[Detection]:
    boxes, scores = decode_arrays(head_one, anchors, cfg, score_thr)
    return [Detection(BBox(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thr: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending score order."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError(f"iou_thr must be in (0, 1], got {iou_thr}")
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return order
    ov = iou_matrix(boxes[order], boxes[order])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(order[i])
        suppressed |= ov[i] >= iou_thr
    return np.array(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    if not dets:
        return []
    boxes = np.array([d.box.to_list() for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_indices(boxes, scores, iou_thr)]


def extract_pseudo_labels(dets: Sequence[Detection], score_thr: float = 0.01, nms_iou: float = 0.5) -> list[BBox]:
    """Boxes of pre-NMS detections scoring above ``score_thr``, deduplicated by NMS."""
    confident = [d for d in dets if d.score > score_thr]
    return [d.box for d in nms(confident, nms_iou)]


def channel_sum_projection(fm) -> np.ndarray:
    """Sum a ``(C, H, W)`` feature map over channels."""
    if isinstance(fm, torch.Tensor):
        fm = fm.detach().cpu().numpy()
    fm = np.asarray(fm)
    if fm.ndim != 3:
        raise ValueError(f"expected a (C, H, W) feature map, got shape {fm.shape}")
    return fm.sum(axis=0)


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(im) for im in images])
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
