"""Joint adaptation step and epoch loop.

Each step pushes one labelled source batch and one unlabelled target batch
through the detector.  The finest head tap feeds the decoupler; its output
is reconstructed into a background-only image and, through gradient
reversal, classified by domain.  One backward pass trains everything: the
discriminator minimises the domain loss while the reversed gradient pushes
the detector and decoupler towards confusing it.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from ..data import ImageSet, cosine_lr, epoch_batches, make_batch, predict, set_lr
from ..datamodel import BBox, DomainLabel
from ..detector import Detector, extract_pseudo_labels, images_to_tensor
from ..evaluation import evaluate
from ..region_ablation import DEFAULT_BANDS, FillPolicy, band_weight_map
from .discriminator import LongShortDiscriminator, LsdConfig
from .losses import (
    LossBundle,
    LossWeights,
    dis_loss_logits,
    gen_loss,
    grl,
    make_background_target,
    resize_for_lsd,
    total_loss,
    weight_map_to_grid,
    weighted_dis_loss,
)
from .modules import BackgroundDecoupler, BdmConfig, FeatureGenerator, FgmConfig

log = logging.getLogger(__name__)

GEN_DOMAINS = ("both", "source", "target")


@dataclass
class AdaptConfig:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.01
    grl_lambda: float = 1.0
    grl_warmup_steps: int = 0  # linear ramp of lambda from 0; off by default
    epochs: int = 6
    batch_size: int = 8
    # the detector continues from the end of its source schedule; the fresh
    # modules get a larger rate because the step budget here is small
    det_lr: float = 2e-4
    det_lr_min: float = 4e-5
    aux_lr: float = 1e-3
    grad_clip: float = 1.0  # max grad norm per optimiser; 0 disables
    use_bdm: bool = True
    use_fgm: bool = True
    fill_policy: str = "average"
    fill_seed: int = 0
    weighted_bands: bool = False
    gen_domains: str = "both"
    pseudo_thr: float = 0.01
    flip: bool = True
    seed: int = 0
    select_by: str = "target"
    bdm: BdmConfig = field(default_factory=BdmConfig)
    fgm: FgmConfig = field(default_factory=FgmConfig)
    lsd: LsdConfig = field(default_factory=LsdConfig)

    def __post_init__(self):
        for name, sub in (("bdm", BdmConfig), ("fgm", FgmConfig), ("lsd", LsdConfig)):
            if isinstance(getattr(self, name), dict):
                setattr(self, name, sub(**getattr(self, name)))
        if self.gen_domains not in GEN_DOMAINS:
            raise ValueError(f"gen_domains must be one of {GEN_DOMAINS}")
        if self.select_by not in ("target", "source"):
            raise ValueError("select_by must be 'target' or 'source'")
        if self.grl_lambda < 0 or self.epochs < 0 or self.batch_size < 1 or self.grad_clip < 0:
            raise ValueError("grl_lambda, epochs and batch_size must be non-negative (batch >= 1)")
        FillPolicy(self.fill_policy, self.fill_seed)
        self.weights  # validates signs

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bdm"], d["fgm"], d["lsd"] = self.bdm.to_dict(), self.fgm.to_dict(), self.lsd.to_dict()
        return d


@dataclass
class AdaptState:
    cfg: AdaptConfig
    det: Detector
    bdm: Optional[BackgroundDecoupler]
    fgm: Optional[FeatureGenerator]
    lsd: LongShortDiscriminator
    det_opt: torch.optim.Optimizer
    aux_opt: torch.optim.Optimizer
    step: int = 0
    epoch: int = 0

    def modules(self) -> dict:
        return {"detector": self.det, "bdm": self.bdm, "fgm": self.fgm, "lsd": self.lsd}

    def grl_lambda(self) -> float:
        w = self.cfg.grl_warmup_steps
        return self.cfg.grl_lambda * (min(1.0, self.step / w) if w > 0 else 1.0)


def build_state(det: Detector, cfg: AdaptConfig) -> AdaptState:
    """Fresh adaptation modules around an (already initialised) detector."""
    tap = det.cfg.head_channels
    for sub in (cfg.bdm, cfg.fgm, cfg.lsd):
        if sub.in_channels != tap:
            raise ValueError(f"adaptation modules expect {sub.in_channels} channels, detector taps {tap}")
    if cfg.fgm.upsample_factor != det.cfg.strides[0]:
        raise ValueError("generator upsampling must equal the detector's finest stride")
    torch.manual_seed(cfg.seed)
    bdm = BackgroundDecoupler(cfg.bdm) if cfg.use_bdm else None
    fgm = FeatureGenerator(cfg.fgm) if cfg.use_fgm else None
    lsd = LongShortDiscriminator(cfg.lsd)
    aux = [p for m in (bdm, fgm, lsd) if m is not None for p in m.parameters()]
    return AdaptState(
        cfg, det, bdm, fgm, lsd,
        torch.optim.Adam(det.parameters(), lr=cfg.det_lr),
        torch.optim.Adam(aux, lr=cfg.aux_lr),
    )


@dataclass
class DomainBatch:
    x: torch.Tensor  # (B, 3, S, S)
    bg_target: torch.Tensor  # (B, 3, S, S)
    annotations: Optional[list] = None  # source only
    weights: Optional[torch.Tensor] = None  # (B, g, g) band weights on the patch grid


def adapt_step(state: AdaptState, src: DomainBatch, tgt: DomainBatch) -> LossBundle:
    """One joint update; raises ``NonFiniteLossError`` before touching any parameter."""
    if len(src.x) == 0 or len(tgt.x) == 0:
        raise ValueError("both batches must be non-empty")
    cfg = state.cfg
    out_s, out_t = state.det(src.x), state.det(tgt.x)
    l_det = state.det.loss(out_s, src.annotations).total
    taps = torch.cat([out_s.tap, out_t.tap])
    bg = state.bdm(taps) if state.bdm is not None else taps
    ns = len(src.x)
    labels = [DomainLabel.SOURCE] * ns + [DomainLabel.TARGET] * len(tgt.x)

    if state.fgm is not None:
        rows = {"both": slice(None), "source": slice(0, ns), "target": slice(ns, None)}[cfg.gen_domains]
        targets = torch.cat([src.bg_target, tgt.bg_target])[rows]
        l_gen = gen_loss(state.fgm(bg[rows]), targets)
    else:
        l_gen = taps.sum() * 0.0

    z = resize_for_lsd(grl(bg, state.grl_lambda()), cfg.lsd.input_size)
    patch = state.lsd.patch_logits(z)
    if cfg.weighted_bands:
        weights = torch.cat([src.weights, tgt.weights]) if src.weights is not None else None
        l_dis = weighted_dis_loss(patch, labels, weights)
    else:
        l_dis = dis_loss_logits(patch.mean(dim=(-2, -1)), labels)

    bundle = total_loss(l_det, l_gen, l_dis, cfg.weights)
    state.det_opt.zero_grad(set_to_none=True)
    state.aux_opt.zero_grad(set_to_none=True)
    bundle.total.backward()
    if cfg.grad_clip > 0:
        for opt in (state.det_opt, state.aux_opt):
            torch.nn.utils.clip_grad_norm_([p for g in opt.param_groups for p in g["params"]], cfg.grad_clip)
    state.det_opt.step()
    state.aux_opt.step()
    state.step += 1
    return bundle


# --- data preparation -------------------------------------------------------


def background_targets(data: ImageSet, boxes_per_image: Sequence[Sequence[BBox]], policy: FillPolicy) -> np.ndarray:
    return np.stack([make_background_target(img, boxes, policy, i)
                     for i, (img, boxes) in enumerate(zip(data.images, boxes_per_image))]).astype(np.float32)


def grid_weights(boxes_per_image: Sequence[Sequence[BBox]], size: int, grid: int, bands=DEFAULT_BANDS) -> np.ndarray:
    return np.stack([weight_map_to_grid(band_weight_map((size, size), boxes, bands), grid)
                     for boxes in boxes_per_image]).astype(np.float32)


def _domain_batch(data: ImageSet, idx, flips, targets: np.ndarray, weights: Optional[np.ndarray],
                  with_annotations: bool) -> DomainBatch:
    x, anns = make_batch(data, idx, flips)
    t = np.stack([targets[i][:, ::-1] if f else targets[i] for i, f in zip(idx, flips)])
    w = None
    if weights is not None:
        w = torch.from_numpy(np.stack([weights[i][:, ::-1] if f else weights[i] for i, f in zip(idx, flips)]).copy())
    return DomainBatch(x, images_to_tensor(t), anns if with_annotations else None, w)


def pseudo_labels(det: Detector, data: ImageSet, thr: float) -> list[list[BBox]]:
    raw = predict(det, data, score_thr=thr, apply_nms=False)
    return [extract_pseudo_labels(d, thr, det.cfg.nms_iou) for d in raw]


# --- epoch loop -------------------------------------------------------------


@dataclass
class AdaptResult:
    history: list[dict]
    initial: dict
    best_epoch: int
    best_modules: dict
    last_modules: dict
    reports: dict = field(default_factory=dict)  # "initial" / "best" / "last" -> evaluation dicts


def _snapshot(state: AdaptState) -> dict:
    return {k: copy.deepcopy(m.state_dict()) for k, m in state.modules().items() if m is not None}


def _eval(det: Detector, data: Optional[ImageSet]) -> Optional[dict]:
    if data is None:
        return None
    return evaluate(predict(det, data), data.annotations)


def _mr2(report: Optional[dict]) -> float:
    if report is None or report["mr2"]["reasonable"] is None:
        return float("inf")
    return report["mr2"]["reasonable"]


def run_adaptation(
    det: Detector,
    src_train: ImageSet,
    tgt_train: ImageSet,
    cfg: AdaptConfig,
    tgt_eval: Optional[ImageSet] = None,
    src_eval: Optional[ImageSet] = None,
    on_epoch: Optional[Callable[[int, dict], None]] = None,
    state: Optional[AdaptState] = None,
) -> tuple[AdaptState, AdaptResult]:
    """Adapt ``det`` for ``cfg.epochs`` epochs, tracking Initial / Best / Last checkpoints."""
    state = state or build_state(det, cfg)
    rng = np.random.default_rng([cfg.seed, 2])
    policy = FillPolicy(cfg.fill_policy, cfg.fill_seed)
    size, grid = src_train.size, cfg.lsd.grid
    src_targets = background_targets(src_train, [src_train.boxes(i) for i in range(len(src_train))], policy)
    src_weights = (grid_weights([src_train.boxes(i) for i in range(len(src_train))], size, grid)
                   if cfg.weighted_bands else None)
    steps_per_epoch = math.ceil(len(src_train) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    sel_data = tgt_eval if cfg.select_by == "target" else src_eval
    initial = {"target": _eval(det, tgt_eval), "source": _eval(det, src_eval)}
    best_score = _mr2(initial[cfg.select_by])
    best_epoch, best = -1, _snapshot(state)
    history: list[dict] = []
    pseudo: list[list[BBox]] = [[] for _ in range(len(tgt_train))]

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        if epoch > 0:
            pseudo = pseudo_labels(det, tgt_train, cfg.pseudo_thr)
        tgt_targets = background_targets(tgt_train, pseudo, policy)
        tgt_weights = grid_weights(pseudo, size, grid) if cfg.weighted_bands else None
        tgt_order = epoch_batches(len(tgt_train), cfg.batch_size, rng, cfg.flip)
        sums = {"l_det": 0.0, "l_gen": 0.0, "l_dis": 0.0, "total": 0.0}
        det.train()
        for idx, flips in epoch_batches(len(src_train), cfg.batch_size, rng, cfg.flip):
            t_idx, t_flips = next(tgt_order, (None, None))
            if t_idx is None:
                tgt_order = epoch_batches(len(tgt_train), cfg.batch_size, rng, cfg.flip)
                t_idx, t_flips = next(tgt_order)
            set_lr(state.det_opt, cosine_lr(state.step, total_steps, cfg.det_lr, cfg.det_lr_min))
            src_b = _domain_batch(src_train, idx, flips, src_targets, src_weights, True)
            tgt_b = _domain_batch(tgt_train, t_idx, t_flips, tgt_targets, tgt_weights, False)
            bundle = adapt_step(state, src_b, tgt_b)
            for k, v in bundle.as_floats().items():
                sums[k] += v
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()},
               "pseudo_boxes": int(sum(len(p) for p in pseudo))}
        tgt_rep, src_rep = _eval(det, tgt_eval), _eval(det, src_eval)
        rec["target_mr2"] = None if tgt_rep is None else tgt_rep["mr2"]["reasonable"]
        rec["source_mr2"] = None if src_rep is None else src_rep["mr2"]["reasonable"]
        score = _mr2(tgt_rep if cfg.select_by == "target" else src_rep)
        if sel_data is not None and score < best_score:
            best_score, best_epoch, best = score, epoch, _snapshot(state)
        history.append(rec)
        log.info("adapt epoch %d: %s", epoch, {k: round(v, 4) if isinstance(v, float) else v for k, v in rec.items()})
        if on_epoch is not None:
            on_epoch(epoch, rec)

    last = _snapshot(state)
    if sel_data is None:
        best_epoch, best = cfg.epochs - 1, last
    return state, AdaptResult(history, initial, best_epoch, best, last)


# --- domain probe -----------------------------------------------------------


@torch.no_grad()
def decoupled_features(det: Detector, bdm: Optional[BackgroundDecoupler], data: ImageSet, batch_size: int = 16) -> torch.Tensor:
    """Frozen decoupler output (or raw tap when ``bdm`` is None) for every image."""
    det.eval()
    feats = []
    for s in range(0, len(data), batch_size):
        tap = det(images_to_tensor(data.images[s:s + batch_size])).tap
        feats.append(bdm(tap) if bdm is not None else tap)
    return torch.cat(feats)


@dataclass
class ProbeConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 3e-4
    seed: int = 0
    lsd: LsdConfig = field(default_factory=LsdConfig)


def train_probe(src_feats: torch.Tensor, tgt_feats: torch.Tensor, cfg: ProbeConfig = ProbeConfig()) -> LongShortDiscriminator:
    """Fit a freshly initialised discriminator on frozen features; half of each batch per domain."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng([cfg.seed, 3])
    probe = LongShortDiscriminator(cfg.lsd)
    opt = torch.optim.Adam(probe.parameters(), lr=cfg.lr)
    half = max(1, cfg.batch_size // 2)
    labels = [DomainLabel.SOURCE] * half + [DomainLabel.TARGET] * half
    for _ in range(cfg.steps):
        i = rng.integers(0, len(src_feats), half)
        j = rng.integers(0, len(tgt_feats), half)
        z = resize_for_lsd(torch.cat([src_feats[i], tgt_feats[j]]), cfg.lsd.input_size)
        loss = dis_loss_logits(probe.patch_logits(z).mean(dim=(-2, -1)), labels)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return probe


@torch.no_grad()
def probe_accuracy(probe: LongShortDiscriminator, src_feats: torch.Tensor, tgt_feats: torch.Tensor,
                   batch_size: int = 16) -> float:
    probe.eval()
    correct = 0
    for feats, want in ((src_feats, False), (tgt_feats, True)):
        for s in range(0, len(feats), batch_size):
            _, p = probe(resize_for_lsd(feats[s:s + batch_size], probe.cfg.input_size))
            correct += int(((p > 0.5) == want).sum())
    return correct / (len(src_feats) + len(tgt_feats))
