"""Paired (shadow, clean) training data.

A deterministic synthetic generator renders document-like pages (near-white
background, dark glyph blocks, optional ruled lines) and darkens them with a
multiplicative shadow field, so the shadowed image never exceeds the clean
one. A directory loader pairs real images by filename.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

from .image_io import ImageBuffer, load_image

SHADOW_KINDS = ("soft_band", "polygon", "gradient")

# Shadow-field values this close to 1 are snapped to exactly 1 so the mask
# boundary is exact: outside the mask, shadow == clean bitwise.
_MASK_CUTOFF = 0.99


@dataclass(frozen=True)
class SynthConfig:
    resolution: int = 64
    n_text_lines: int = 5
    font_scale: float = 1.0
    shadow_kind: str = "soft_band"
    shadow_attenuation: float = 0.5
    penumbra_sigma: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.shadow_kind not in SHADOW_KINDS:
            raise ValueError(f"shadow_kind must be one of {SHADOW_KINDS}, got {self.shadow_kind!r}")
        if not 0.0 < self.shadow_attenuation < 1.0:
            raise ValueError(f"attenuation must lie strictly in (0, 1), got {self.shadow_attenuation}")
        if self.resolution < 16:
            raise ValueError(f"resolution must be >= 16, got {self.resolution}")
        if self.penumbra_sigma < 0.0:
            raise ValueError(f"penumbra_sigma must be >= 0, got {self.penumbra_sigma}")


@dataclass(frozen=True)
class TrainSample:
    """A shadowed image, its clean counterpart, and (synthetic only) the
    ground-truth shadow mask. The mask exists for test assertions; model
    entry points never accept it."""

    shadow: ImageBuffer
    clean: ImageBuffer
    shadow_mask: ImageBuffer | None
    provenance: str

    def __post_init__(self):
        if self.shadow.shape != self.clean.shape:
            raise ValueError(
                f"shadow {self.shadow.shape} and clean {self.clean.shape} dims differ"
            )


def _render_page(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    res = cfg.resolution
    background = rng.uniform(0.85, 0.98)
    page = np.full((res, res, 3), background, dtype=np.float64)

    if rng.uniform() < 0.3:  # ruled lines
        spacing = max(4, res // max(cfg.n_text_lines, 1))
        shade = rng.uniform(0.55, 0.75)
        for y in range(spacing, res, spacing):
            page[y, :, :] = shade

    line_h = max(2, int(round(cfg.font_scale * res / (3 * max(cfg.n_text_lines, 1)))))
    margin = max(2, res // 16)
    for _ in range(cfg.n_text_lines):
        top = int(rng.integers(margin, max(margin + 1, res - margin - line_h)))
        x = margin
        right = res - margin
        while x < right - 2:
            glyph_w = int(rng.integers(2, max(3, res // 10)))
            gap = int(rng.integers(2, max(3, res // 16)))
            ink = rng.uniform(0.08, 0.3)
            x_end = min(x + glyph_w, right)
            if rng.uniform() < 0.75:  # word gaps leave some blanks
                page[top : top + line_h, x:x_end, :] = ink
            x = x_end + gap
    return page


def _shadow_field(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    res = cfg.resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    theta = rng.uniform(0.0, np.pi)
    normal = np.array([np.cos(theta), np.sin(theta)])
    center_offset = rng.uniform(-res / 8.0, res / 8.0)
    d = (xx - res / 2.0) * normal[0] + (yy - res / 2.0) * normal[1] - center_offset

    a = cfg.shadow_attenuation
    if cfg.shadow_kind == "soft_band":
        half_width = rng.uniform(res / 6.0, res / 3.0)
        field = np.where(np.abs(d) < half_width, a, 1.0)
    elif cfg.shadow_kind == "polygon":
        n_vertices = int(rng.integers(3, 6))
        # spread angles around the circle so the polygon never degenerates
        angles = (np.arange(n_vertices) + rng.uniform(0.2, 0.8, size=n_vertices)) * (
            2.0 * np.pi / n_vertices
        )
        radii = rng.uniform(res / 5.0, res / 2.5, size=n_vertices)
        cx = res / 2.0 + rng.uniform(-res / 8.0, res / 8.0)
        cy = res / 2.0 + rng.uniform(-res / 8.0, res / 8.0)
        pts = np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)
        interior = np.zeros((res, res), dtype=np.uint8)
        cv2.fillConvexPoly(interior, np.round(pts).astype(np.int32), 1)
        field = np.where(interior > 0, a, 1.0)
    else:  # gradient: smooth ramp into a half-plane shadow with a deep core
        ramp_len = rng.uniform(res / 8.0, res / 5.0)
        field = 1.0 - (1.0 - a) * np.clip(d / ramp_len, 0.0, 1.0)

    if cfg.penumbra_sigma > 0.0:
        field = gaussian_filter(field, cfg.penumbra_sigma, mode="nearest")
    field = np.clip(field, a, 1.0)
    field[field >= _MASK_CUTOFF] = 1.0
    return field


def synth_pair(cfg: SynthConfig) -> TrainSample:
    """Deterministically generate one paired sample from the config seed."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    clean = _render_page(rng, cfg)
    field = _shadow_field(rng, cfg)
    for _ in range(8):  # redraw shadows that blur away or swallow the page
        frac = float((field < _MASK_CUTOFF).mean())
        if 0.02 <= frac <= 0.95:
            break
        field = _shadow_field(rng, cfg)
    shadow = clean * field[:, :, None]
    mask = (field < _MASK_CUTOFF).astype(np.float32)
    return TrainSample(
        shadow=ImageBuffer(shadow.astype(np.float32)),
        clean=ImageBuffer(clean.astype(np.float32)),
        shadow_mask=ImageBuffer(mask),
        provenance=f"synth:seed={cfg.seed}:kind={cfg.shadow_kind}",
    )


def synth_dataset(n: int, base_seed: int = 0, resolution: int = 64) -> list[TrainSample]:
    """n varied samples: shadow kinds cycle and attenuation is drawn per
    sample from a range the contrast extractor separates reliably."""
    samples = []
    for i in range(n):
        seed = base_seed + i
        draw = np.random.Generator(np.random.PCG64(seed ^ 0x5EED))
        cfg = SynthConfig(
            resolution=resolution,
            shadow_kind=SHADOW_KINDS[i % len(SHADOW_KINDS)],
            shadow_attenuation=float(draw.uniform(0.35, 0.5)),
            seed=seed,
        )
        samples.append(synth_pair(cfg))
    return samples


def load_paired_dir(shadow_dir: str | Path, clean_dir: str | Path) -> list[TrainSample]:
    """Pair images from two directories by identical filename, sorted.

    Unmatched filenames are skipped with a warning each; an empty
    intersection is an error. Per-pair dimension mismatches are errors.
    """
    shadow_dir, clean_dir = Path(shadow_dir), Path(clean_dir)
    shadow_files = {p.name: p for p in shadow_dir.iterdir() if p.is_file()}
    clean_files = {p.name: p for p in clean_dir.iterdir() if p.is_file()}
    common = sorted(shadow_files.keys() & clean_files.keys())
    if not common:
        raise ValueError(f"no filenames shared between {shadow_dir} and {clean_dir}")
    for name in sorted(shadow_files.keys() ^ clean_files.keys()):
        warnings.warn(f"unmatched file skipped: {name}", stacklevel=2)
    samples = []
    for name in common:
        shadow = load_image(shadow_files[name])
        clean = load_image(clean_files[name])
        if shadow.shape != clean.shape:
            raise ValueError(f"{name}: shadow {shadow.shape} vs clean {clean.shape}")
        samples.append(
            TrainSample(
                shadow=shadow,
                clean=clean,
                shadow_mask=None,
                provenance=f"pair:{shadow_files[name]}:{clean_files[name]}",
            )
        )
    return samples
