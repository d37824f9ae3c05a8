"""Contrast heatmap extraction and its learned adaptive adjustment.

The raw heatmap scores likely-shadow regions using classical processing
only; higher value = more shadow-like. A small convolutional adjuster then
reweights the heatmap so downstream conditioning sees a normalized signal
regardless of the input's lighting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn

from .image_io import ImageBuffer, to_luminance

Stage = Literal["raw", "adjusted"]

# Degenerate-contrast cutoff: percentile spread below this yields the
# documented all-zero fallback instead of a divide-by-ruin.
_MIN_SPREAD = 1e-9


@dataclass(frozen=True)
class ContrastConfig:
    """Parameters of the classical heatmap pipeline."""

    low_percentile: float = 0.02
    high_percentile: float = 0.98
    sigmoid_gain: float = 10.0
    blur_sigma: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.low_percentile < self.high_percentile <= 1.0:
            raise ValueError(
                f"need 0 <= low < high <= 1, got {self.low_percentile}, {self.high_percentile}"
            )
        if self.sigmoid_gain <= 0.0:
            raise ValueError(f"sigmoid_gain must be > 0, got {self.sigmoid_gain}")
        if self.blur_sigma < 0.0:
            raise ValueError(f"blur_sigma must be >= 0, got {self.blur_sigma}")


@dataclass(frozen=True)
class ContrastRepresentation:
    """Single-channel heatmap in [0, 1]; high value = shadow."""

    heatmap: ImageBuffer
    stage: Stage

    def __post_init__(self):
        if self.heatmap.channels != 1:
            raise ValueError("heatmap must be single-channel")
        if self.stage not in ("raw", "adjusted"):
            raise ValueError(f"unknown stage {self.stage!r}")


def extract_contrast_heatmap(
    img: ImageBuffer, cfg: ContrastConfig = ContrastConfig()
) -> ContrastRepresentation:
    """Score shadow-like regions from luminance contrast alone.

    Pipeline: luminance -> percentile stretch -> sigmoid contrast boost ->
    inversion (dark scores high) -> Gaussian blur -> clamp. An image whose
    low and high percentiles coincide has no usable contrast and maps to the
    all-zero heatmap.
    """
    lum = to_luminance(img).data[:, :, 0].astype(np.float64)
    lo = np.quantile(lum, cfg.low_percentile)
    hi = np.quantile(lum, cfg.high_percentile)
    if hi - lo < _MIN_SPREAD:
        heat = np.zeros_like(lum)
    else:
        v = np.clip((lum - lo) / (hi - lo), 0.0, 1.0)
        boosted = 1.0 / (1.0 + np.exp(-cfg.sigmoid_gain * (v - 0.5)))
        heat = 1.0 - boosted
        if cfg.blur_sigma > 0.0:
            heat = gaussian_filter(heat, cfg.blur_sigma, mode="nearest")
        heat = np.clip(heat, 0.0, 1.0)
    return ContrastRepresentation(ImageBuffer(heat.astype(np.float32)), "raw")


class ContrastAdjuster(nn.Module):
    """Fully-convolutional heatmap reweighter (1->16->16->1, sigmoid output).

    Trained only through the joint loss; it has no dedicated objective. The
    activation is smooth so finite-difference gradient audits stay valid at
    their stated step size.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, padding=1)
        self.conv2 = nn.Conv2d(16, 16, 3, padding=1)
        self.conv3 = nn.Conv2d(16, 1, 3, padding=1)
        self.act = nn.SiLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) heatmap batch, got {tuple(x.shape)}")
        h = self.act(self.conv1(x))
        h = self.act(self.conv2(h))
        return torch.sigmoid(self.conv3(h))


def adjust_contrast(raw: ContrastRepresentation, adjuster: ContrastAdjuster) -> ContrastRepresentation:
    """Run the adjuster over a raw heatmap (inference path, no gradients)."""
    if raw.stage != "raw":
        raise ValueError(f"expected a raw heatmap, got stage {raw.stage!r}")
    x = torch.from_numpy(raw.heatmap.data.copy()).permute(2, 0, 1).unsqueeze(0)
    with torch.no_grad():
        y = adjuster(x)
    out = y[0].permute(1, 2, 0).numpy()
    return ContrastRepresentation(ImageBuffer(out), "adjusted")
