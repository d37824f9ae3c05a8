"""PSNR, SSIM, and RMSE on the 0-255 scale, plus paired-directory evaluation.

Images live in [0, 1] everywhere else; metrics rescale internally so the
reported magnitudes match 8-bit conventions.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .image_io import ImageBuffer, load_image, resize_bilinear

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01 * 255.0) ** 2
SSIM_C2 = (0.03 * 255.0) ** 2


def _scaled(a: ImageBuffer, b: ImageBuffer) -> tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a.data.astype(np.float64) * 255.0, b.data.astype(np.float64) * 255.0


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    x, y = _scaled(a, b)
    mse = np.mean((x - y) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def rmse(a: ImageBuffer, b: ImageBuffer) -> float:
    x, y = _scaled(a, b)
    return float(np.sqrt(np.mean((x - y) ** 2)))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def ssim(a: ImageBuffer, b: ImageBuffer) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Weighted moments are computed on the valid interior (no padding), per
    channel, and channel means are averaged.
    """
    x, y = _scaled(a, b)
    if x.shape[0] < SSIM_WINDOW or x.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[0]}x{x.shape[1]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = _gaussian_window()
    per_channel = []
    for c in range(x.shape[2]):
        xc, yc = x[:, :, c], y[:, :, c]
        mu_x = fftconvolve(xc, w, mode="valid")
        mu_y = fftconvolve(yc, w, mode="valid")
        var_x = fftconvolve(xc * xc, w, mode="valid") - mu_x * mu_x
        var_y = fftconvolve(yc * yc, w, mode="valid") - mu_y * mu_y
        cov = fftconvolve(xc * yc, w, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        per_channel.append(np.mean(num / den))
    return float(np.mean(per_channel))


@dataclass(frozen=True)
class MetricRow:
    name: str
    psnr: float
    ssim: float
    rmse: float


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[MetricRow, ...]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    @property
    def mean_rmse(self) -> float:
        return float(np.mean([r.rmse for r in self.rows]))

    def to_csv(self) -> str:
        lines = ["filename,psnr,ssim,rmse"]
        for r in self.rows:
            lines.append(f"{r.name},{r.psnr:.6f},{r.ssim:.6f},{r.rmse:.6f}")
        lines.append(f"MEAN,{self.mean_psnr:.6f},{self.mean_ssim:.6f},{self.mean_rmse:.6f}")
        return "\n".join(lines) + "\n"


def compare(pred: ImageBuffer, gt: ImageBuffer, name: str = "") -> MetricRow:
    return MetricRow(name=name, psnr=psnr(pred, gt), ssim=ssim(pred, gt), rmse=rmse(pred, gt))


def evaluate_dir(pred_dir: str | Path, gt_dir: str | Path, resolution: int) -> MetricReport:
    """Metrics over filename-paired directories, both sides resized first."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    pred_files = {p.name: p for p in pred_dir.iterdir() if p.is_file()}
    gt_files = {p.name: p for p in gt_dir.iterdir() if p.is_file()}
    common = sorted(pred_files.keys() & gt_files.keys())
    if not common:
        raise ValueError(f"no filenames shared between {pred_dir} and {gt_dir}")
    for name in sorted(pred_files.keys() ^ gt_files.keys()):
        warnings.warn(f"unmatched file skipped: {name}", stacklevel=2)
    rows = []
    for name in common:
        pred = resize_bilinear(load_image(pred_files[name]), resolution, resolution)
        gt = resize_bilinear(load_image(gt_files[name]), resolution, resolution)
        rows.append(compare(pred, gt, name=name))
    return MetricReport(rows=tuple(rows))
