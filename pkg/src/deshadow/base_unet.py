"""Coarse shadow-removal stage: a plain U-Net from shadowed input to a
first-pass shadow-free prediction."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .layers import ConvBlock


@dataclass(frozen=True)
class BaseUNetConfig:
    in_channels: int = 3
    out_channels: int = 3
    base_width: int = 16
    depth: int = 3
    norm_groups: int = 8

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_width % self.norm_groups != 0:
            raise ValueError(
                f"base_width {self.base_width} not divisible by norm_groups {self.norm_groups}"
            )

    def level_width(self, level: int) -> int:
        return self.base_width * (2**level)


class BaseUNet(nn.Module):
    """Encoder-decoder with skip connections and a sigmoid output head.

    Downsampling is a strided conv, upsampling nearest-neighbor followed by a
    conv; skips are channel-concatenated. The sigmoid head keeps predictions
    in [0, 1] without clamping inside the loss.
    """

    def __init__(self, cfg: BaseUNetConfig = BaseUNetConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.level_width(i) for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for i, w in enumerate(widths):
            self.enc.append(ConvBlock(prev, w, cfg.norm_groups))
            if i < cfg.depth - 1:
                self.down.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))
            prev = widths[i + 1] if i < cfg.depth - 1 else w
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in reversed(range(cfg.depth - 1)):
            self.up.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.dec.append(ConvBlock(2 * widths[i], widths[i], cfg.norm_groups))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}")
        stride = 2 ** (cfg.depth - 1)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {stride}")
        skips = []
        h = x
        for i in range(cfg.depth):
            h = self.enc[i](h)
            if i < cfg.depth - 1:
                skips.append(h)
                h = self.down[i](h)
        for j in range(cfg.depth - 1):
            h = self.up[j](F.interpolate(h, scale_factor=2, mode="nearest"))
            h = self.dec[j](torch.cat([h, skips.pop()], dim=1))
        return torch.sigmoid(self.head(h))


def base_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every element of the batch."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((target - pred) ** 2).mean()
