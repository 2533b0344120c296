"""Reconstruction, domain and total losses, gradient reversal, and resizing."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..datamodel import BBox
from ..region_ablation import FillPolicy, apply_fill, union_box_mask


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.01

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBundle:
    l_det: object
    l_gen: object
    l_dis: object
    total: object

    def as_floats(self) -> dict:
        return {k: _scalar(v) for k, v in vars(self).items()}


def _scalar(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


def total_loss(l_det, l_gen, l_dis, w: LossWeights = LossWeights()) -> LossBundle:
    for name, part in (("l_det", l_det), ("l_gen", l_gen), ("l_dis", l_dis)):
        if not math.isfinite(_scalar(part)):
            raise NonFiniteLossError(f"{name} is not finite ({_scalar(part)})")
    total = w.alpha * l_det + w.beta * l_gen + w.gamma * l_dis
    return LossBundle(l_det, l_gen, l_dis, total)


def gen_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-image L1 reconstruction loss, channel-summed and divided by H*W.

    Accepts ``(3, H, W)`` or ``(B, 3, H, W)``; batches are averaged over images.
    """
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(recon.shape)} vs {tuple(target.shape)}")
    if recon.dim() == 3:
        recon, target = recon[None], target[None]
    h, w = recon.shape[-2:]
    per_image = (recon - target).abs().sum(dim=(1, 2, 3)) / (h * w)
    return per_image.mean()


def make_background_target(img: np.ndarray, boxes: Sequence[BBox], policy: FillPolicy = FillPolicy("average"),
                           image_index: int = 0) -> np.ndarray:
    """Image with every box region replaced according to ``policy`` (mean colour by default)."""
    mask = union_box_mask(img.shape[:2], boxes)
    return apply_fill(img, mask, policy, image_index)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * (-ctx.lam), None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    if lam < 0:
        raise ValueError("GRL lambda must be non-negative")
    return _GradReverse.apply(x, float(lam))


def resize_for_lsd(fm: torch.Tensor, size: int = 224) -> torch.Tensor:
    squeeze = fm.dim() == 3
    x = fm[None] if squeeze else fm
    if x.shape[-2:] != (size, size):
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return x[0] if squeeze else x


def _labels_tensor(labels, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor([float(int(d)) for d in labels], dtype=like.dtype)


def dis_loss(ps: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """Summed binary cross-entropy (natural log) of target-domain probabilities."""
    ps = torch.as_tensor(ps)
    if len(ps) != len(labels):
        raise ValueError("one label per probability required")
    if torch.any(ps <= 0) or torch.any(ps >= 1):
        raise ValueError("probabilities must lie strictly inside (0, 1)")
    d = _labels_tensor(labels, ps)
    return -(d * torch.log(ps) + (1 - d) * torch.log(1 - ps)).sum()


def dis_loss_logits(image_logits: torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """Same as :func:`dis_loss` but from pre-sigmoid scores, stable for confident outputs."""
    d = _labels_tensor(labels, image_logits)
    return F.binary_cross_entropy_with_logits(image_logits, d, reduction="sum")


def weighted_dis_loss(patch_logits: torch.Tensor, labels: Sequence[int],
                      weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per image, the weighted mean of per-patch cross-entropies; summed over images.

    ``weights`` is ``(B, g, g)`` on the patch grid; ``None`` means uniform.
    """
    d = _labels_tensor(labels, patch_logits)[:, None, None].expand_as(patch_logits)
    ce = F.binary_cross_entropy_with_logits(patch_logits, d, reduction="none")
    if weights is None:
        return ce.mean(dim=(1, 2)).sum()
    weights = weights.to(patch_logits.dtype)
    return ((ce * weights).sum(dim=(1, 2)) / weights.sum(dim=(1, 2))).sum()


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row k holds the overlap of output cell k with each input cell, normalised."""
    edges = np.linspace(0.0, n_in, n_out + 1)
    m = np.zeros((n_out, n_in))
    for k in range(n_out):
        lo, hi = edges[k], edges[k + 1]
        for i in range(int(np.floor(lo)), min(n_in, int(np.ceil(hi)))):
            m[k, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return m / m.sum(axis=1, keepdims=True)


def weight_map_to_grid(wmap: np.ndarray, grid: int) -> np.ndarray:
    """Exact area-average of an ``(H, W)`` weight map onto a ``grid x grid`` patch grid."""
    h, w = wmap.shape
    return _area_matrix(h, grid) @ wmap @ _area_matrix(w, grid).T
