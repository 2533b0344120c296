"""Background decoupling and image reconstruction networks."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from ..detector import ResBlock, conv_act


@dataclass
class BdmConfig:
    in_channels: int = 32
    widths: tuple[int, ...] = (32, 48, 64)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass
class FgmConfig:
    in_channels: int = 32
    width: int = 32
    res_blocks: int = 2
    up_widths: tuple[int, ...] = (24, 12, 6)

    def __post_init__(self):
        self.up_widths = tuple(int(w) for w in self.up_widths)

    @property
    def upsample_factor(self) -> int:
        return 2 ** len(self.up_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["up_widths"] = list(self.up_widths)
        return d


class BackgroundDecoupler(nn.Module):
    """Multilevel encoder-decoder; output has the input's shape."""

    def __init__(self, cfg: BdmConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BdmConfig()
        w = cfg.widths
        self.down = nn.ModuleList([nn.Sequential(conv_act(cfg.in_channels, w[0]), conv_act(w[0], w[0]))])
        for a, b in zip(w, w[1:]):
            self.down.append(nn.Sequential(conv_act(a, b, 3, 2), conv_act(b, b)))
        self.lateral = nn.ModuleList([nn.Conv2d(b, a, 1) for a, b in zip(w, w[1:])])
        self.up = nn.ModuleList([conv_act(a, a) for a in w[:-1]])
        self.out = nn.Conv2d(w[0], cfg.in_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected (B, {self.cfg.in_channels}, H, W) input, got {tuple(x.shape)}")
        levels = []
        for stage in self.down:
            x = stage(x)
            levels.append(x)
        y = levels[-1]
        for k in range(len(levels) - 2, -1, -1):
            skip = levels[k]
            y = F.interpolate(self.lateral[k](y), size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.up[k](y + skip)
        return self.out(y)


class FeatureGenerator(nn.Module):
    """Residual encoder followed by stride-2 transposed convolutions to an RGB image."""

    def __init__(self, cfg: FgmConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FgmConfig()
        self.encoder = nn.Sequential(
            conv_act(cfg.in_channels, cfg.width), *[ResBlock(cfg.width) for _ in range(cfg.res_blocks)]
        )
        ups = []
        cin = cfg.width
        for cout in cfg.up_widths:
            ups += [nn.ConvTranspose2d(cin, cout, 2, 2), nn.SiLU()]
            cin = cout
        self.decoder = nn.Sequential(*ups)
        self.to_rgb = nn.Conv2d(cin, 3, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_rgb(self.decoder(self.encoder(x)))
