"""Long-short-range domain discriminator.

The long branch is a small transformer over convolutional token embeddings
with convolutional q/k/v projections.  The short branch keeps two parallel
resolution streams that exchange features after every stage.  Both end on a
shared patch grid where their logits are added.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from ..detector import conv_act


@dataclass
class LsdConfig:
    in_channels: int = 32
    input_size: int = 224
    grid: int = 14
    long_dim: int = 32
    long_depth: int = 1
    long_heads: int = 2
    long_stride: int = 8
    short_widths: tuple[int, int] = (16, 32)
    short_stages: int = 2
    use_long: bool = True
    use_short: bool = True

    def __post_init__(self):
        self.short_widths = tuple(int(w) for w in self.short_widths)
        if self.input_size % self.grid:
            raise ValueError("patch grid must divide the input size")
        if (self.input_size // self.long_stride) % self.grid:
            raise ValueError("long-branch token grid must be a multiple of the patch grid")
        if (self.input_size // 4) % (2 * self.grid):
            raise ValueError("short-branch streams must pool evenly onto the patch grid")
        if self.long_dim % self.long_heads:
            raise ValueError("long_dim must be divisible by long_heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["short_widths"] = list(self.short_widths)
        return d


class ConvAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q_proj = nn.Conv2d(dim, dim, 3, 1, 1, groups=dim)
        self.kv_proj = nn.Conv2d(dim, dim, 3, 2, 1, groups=dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, 2 * dim)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, hw: tuple[int, int]) -> torch.Tensor:
        h, w = hw
        grid = rearrange(x, "b (h w) c -> b c h w", h=h, w=w)
        q = self.to_q(rearrange(self.q_proj(grid), "b c h w -> b (h w) c"))
        k, v = self.to_kv(rearrange(self.kv_proj(grid), "b c h w -> b (h w) c")).chunk(2, dim=-1)
        q, k, v = (rearrange(t, "b n (h d) -> b h n d", h=self.heads) for t in (q, k, v))
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return self.to_out(rearrange(attn @ v, "b h n d -> b n (h d)"))


class ConvTransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = ConvAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x), hw)
        return x + self.mlp(self.norm2(x))


class LongRangeBranch(nn.Module):
    def __init__(self, cfg: LsdConfig):
        super().__init__()
        s = cfg.long_stride
        self.embed = nn.Conv2d(cfg.in_channels, cfg.long_dim, s + 3, s, (s + 3) // 2)
        self.norm = nn.LayerNorm(cfg.long_dim)
        self.blocks = nn.ModuleList([ConvTransformerBlock(cfg.long_dim, cfg.long_heads) for _ in range(cfg.long_depth)])
        self.grid = cfg.grid
        self.out_channels = cfg.long_dim

    def forward(self, x):
        t = self.embed(x)
        hw = t.shape[-2:]
        tokens = self.norm(rearrange(t, "b c h w -> b (h w) c"))
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        grid = rearrange(tokens, "b (h w) c -> b c h w", h=hw[0], w=hw[1])
        return F.adaptive_avg_pool2d(grid, self.grid)


class ShortRangeBranch(nn.Module):
    def __init__(self, cfg: LsdConfig):
        super().__init__()
        hi, lo = cfg.short_widths
        self.stem = nn.Sequential(nn.Conv2d(cfg.in_channels, hi, 4, 4), nn.SiLU())
        self.to_low = conv_act(hi, lo, 3, 2)
        self.hi_blocks = nn.ModuleList([conv_act(hi, hi) for _ in range(cfg.short_stages)])
        self.lo_blocks = nn.ModuleList([conv_act(lo, lo) for _ in range(cfg.short_stages)])
        self.lo_to_hi = nn.ModuleList([nn.Conv2d(lo, hi, 1) for _ in range(cfg.short_stages)])
        self.hi_to_lo = nn.ModuleList([nn.Conv2d(hi, lo, 3, 2, 1) for _ in range(cfg.short_stages)])
        self.merge = conv_act(hi + lo, hi + lo, 1)
        self.grid = cfg.grid
        self.out_channels = hi + lo

    def forward(self, x):
        high = self.stem(x)
        low = self.to_low(high)
        for hb, lb, l2h, h2l in zip(self.hi_blocks, self.lo_blocks, self.lo_to_hi, self.hi_to_lo):
            high, low = hb(high), lb(low)
            up = F.interpolate(l2h(low), size=high.shape[-2:], mode="bilinear", align_corners=False)
            high, low = high + up, low + h2l(high)
        pooled = torch.cat([F.adaptive_avg_pool2d(high, self.grid), F.adaptive_avg_pool2d(low, self.grid)], dim=1)
        return self.merge(pooled)


class FusionHead(nn.Module):
    """Per-branch 1x1 projections to a logit; branch logits are summed."""

    def __init__(self, long_ch: int | None, short_ch: int | None):
        super().__init__()
        self.long_proj = nn.Conv2d(long_ch, 1, 1) if long_ch else None
        self.short_proj = nn.Conv2d(short_ch, 1, 1) if short_ch else None

    def forward(self, long_feat, short_feat):
        logits = 0.0
        if self.long_proj is not None:
            logits = logits + self.long_proj(long_feat)
        if self.short_proj is not None:
            logits = logits + self.short_proj(short_feat)
        return logits[:, 0]

    def zero_(self):
        for proj in (self.long_proj, self.short_proj):
            if proj is not None:
                nn.init.zeros_(proj.weight)
                nn.init.zeros_(proj.bias)
        return self


class LongShortDiscriminator(nn.Module):
    def __init__(self, cfg: LsdConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or LsdConfig()
        if not (cfg.use_long or cfg.use_short):
            raise ValueError("discriminator needs at least one branch")
        self.long = LongRangeBranch(cfg) if cfg.use_long else None
        self.short = ShortRangeBranch(cfg) if cfg.use_short else None
        self.head = FusionHead(
            self.long.out_channels if self.long else None, self.short.out_channels if self.short else None
        )

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return ``(patch_logits (B, g, g), p (B,))`` with ``p`` the target-domain probability."""
        s = self.cfg.input_size
        if x.dim() != 4 or x.shape[-2:] != (s, s):
            raise ValueError(f"discriminator expects {s}x{s} spatial input, got {tuple(x.shape)}")
        patch_logits = self.patch_logits(x)
        return patch_logits, torch.sigmoid(patch_logits.mean(dim=(-2, -1)))

    def patch_logits(self, x: torch.Tensor) -> torch.Tensor:
        long_feat = self.long(x) if self.long is not None else None
        short_feat = self.short(x) if self.short is not None else None
        return self.head(long_feat, short_feat)
