"""Refinement stage: a conditioned denoising diffusion model.

The denoiser sees the noisy target concatenated with the coarse prediction
and, unless conditioning is disabled, attends over tokens encoding the
contrast representation. It predicts the clean image directly (x0
parameterization), so the refinement loss is plain image-space MSE and
ancestral sampling uses the standard Gaussian posterior for each step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .image_io import ImageBuffer, resize_bilinear
from .layers import (
    AttentionBlockConfig,
    ConvBlock,
    CrossAttentionBlock,
    sinusoidal_time_embedding,
)

TOKEN_STRIDE = 8  # three stride-2 convs in the context encoder


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels and their cumulative products (float64)."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def __post_init__(self):
        b = self.betas
        if len(b) < 1 or np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("betas must lie strictly in (0, 1)")
        if len(b) > 1 and np.any(np.diff(b) <= 0.0):
            raise ValueError("betas must be strictly increasing")
        if self.alpha_bars[-1] <= 0.0:
            raise ValueError("terminal alpha_bar must stay positive")


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over T steps, endpoints inclusive."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0 and not (T == 1 and 0.0 < beta_start < 1.0):
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array(
        [beta_start], dtype=np.float64
    )
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_noise(
    x0: torch.Tensor, t: int | torch.Tensor, noise: torch.Tensor, sched: NoiseSchedule
) -> torch.Tensor:
    """Closed-form noising marginal: sqrt(a_bar_t) x0 + sqrt(1 - a_bar_t) eps.

    ``t`` is 1-based; a per-item tensor applies a different step to each
    batch element.
    """
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    t_arr = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if torch.any(t_arr < 1) or torch.any(t_arr > sched.T):
        raise ValueError(f"t out of range 1..{sched.T}: {t_arr.tolist()}")
    ab = torch.from_numpy(sched.alpha_bars[t_arr.numpy() - 1]).to(x0.dtype)
    while ab.ndim < x0.ndim:
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * noise


@dataclass(frozen=True)
class DenoiserConfig:
    image_channels: int = 3
    base_width: int = 16
    depth: int = 3
    norm_groups: int = 8
    time_embed_dim: int = 64
    context_dim: int = 32
    attn_inner_dim: int = 32
    attn_levels: tuple[int, ...] | None = None  # None = every decoder level
    with_attention: bool = True

    @property
    def in_channels(self) -> int:
        # noisy target stacked with the coarse prediction
        return 2 * self.image_channels

    def decoder_levels(self) -> tuple[int, ...]:
        return tuple(range(self.depth - 1))

    def attention_levels(self) -> tuple[int, ...]:
        if not self.with_attention:
            return ()
        if self.attn_levels is None:
            return self.decoder_levels()
        bad = set(self.attn_levels) - set(self.decoder_levels())
        if bad:
            raise ValueError(f"attention levels {sorted(bad)} outside decoder range")
        return tuple(sorted(self.attn_levels))


@dataclass(frozen=True)
class ContextTokens:
    """Flattened token grid produced from the contrast representation."""

    tokens: torch.Tensor  # (B, n_tokens, context_dim)
    grid: tuple[int, int]

    def __post_init__(self):
        th, tw = self.grid
        if self.tokens.ndim != 3 or self.tokens.shape[1] != th * tw:
            raise ValueError(
                f"token count {tuple(self.tokens.shape)} inconsistent with grid {self.grid}"
            )


class ContextEncoder(nn.Module):
    """Maps the single-channel contrast heatmap to a token grid at stride 8.

    Replicate padding keeps the encoder translation-invariant on constant
    inputs (a constant heatmap yields identical tokens everywhere).
    """

    def __init__(self, context_dim: int = 32):
        super().__init__()
        self.context_dim = context_dim
        self.conv1 = nn.Conv2d(1, 16, 3, stride=2, padding=1, padding_mode="replicate")
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1, padding_mode="replicate")
        self.conv3 = nn.Conv2d(32, context_dim, 3, stride=2, padding=1, padding_mode="replicate")
        self.act = nn.SiLU()

    def forward(self, c: torch.Tensor) -> ContextTokens:
        if c.ndim != 4 or c.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) heatmap batch, got {tuple(c.shape)}")
        if c.shape[2] < TOKEN_STRIDE or c.shape[3] < TOKEN_STRIDE:
            raise ValueError(f"input {c.shape[2]}x{c.shape[3]} smaller than {TOKEN_STRIDE}x{TOKEN_STRIDE}")
        h = self.act(self.conv1(c))
        h = self.act(self.conv2(h))
        h = self.conv3(h)
        b, d, th, tw = h.shape
        return ContextTokens(tokens=h.reshape(b, d, th * tw).transpose(1, 2), grid=(th, tw))


class _DecoderLevel(nn.Module):
    def __init__(self, cfg: DenoiserConfig, level: int):
        super().__init__()
        w_in = cfg.base_width * (2 ** (level + 1))
        w_out = cfg.base_width * (2**level)
        self.up = nn.Conv2d(w_in, w_out, 3, padding=1)
        self.block = ConvBlock(2 * w_out, w_out, cfg.norm_groups, time_dim=cfg.time_embed_dim)
        self.attn = (
            CrossAttentionBlock(
                AttentionBlockConfig(
                    query_channels=w_out,
                    context_dim=cfg.context_dim,
                    inner_dim=cfg.attn_inner_dim,
                    layer_index=level,
                )
            )
            if level in cfg.attention_levels()
            else None
        )

    def forward(self, h, skip, temb, tokens):
        h = self.up(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block(torch.cat([h, skip], dim=1), temb)
        if self.attn is not None:
            if tokens is None:
                raise ValueError("denoiser carries attention but no context tokens were given")
            h = self.attn(h, tokens)
        return h


class DenoiserUNet(nn.Module):
    """Time-conditioned U-Net over (noisy target, coarse prediction) stacks,
    predicting the clean image through a sigmoid head."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * (2**i) for i in range(cfg.depth)]
        self.time_lin = nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim)
        self.time_act = nn.SiLU()
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = cfg.in_channels
        for i, w in enumerate(widths):
            self.enc.append(ConvBlock(prev, w, cfg.norm_groups, time_dim=cfg.time_embed_dim))
            if i < cfg.depth - 1:
                self.down.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))
            prev = widths[i + 1] if i < cfg.depth - 1 else w
        self.decoder = nn.ModuleList(
            _DecoderLevel(cfg, level) for level in reversed(range(cfg.depth - 1))
        )
        self.head = nn.Conv2d(widths[0], cfg.image_channels, 1)

    def attention_block(self, level: int) -> CrossAttentionBlock:
        for lvl in self.decoder:
            if lvl.attn is not None and lvl.attn.cfg.layer_index == level:
                return lvl.attn
        raise ValueError(f"decoder level {level} carries no attention block")

    def forward(
        self,
        x_t: torch.Tensor,
        t: int | torch.Tensor,
        condition: torch.Tensor,
        ctx: ContextTokens | None = None,
    ) -> torch.Tensor:
        cfg = self.cfg
        if x_t.shape != condition.shape:
            raise ValueError(
                f"condition shape {tuple(condition.shape)} != input shape {tuple(x_t.shape)}"
            )
        x = torch.cat([x_t, condition], dim=1)
        stride = 2 ** (cfg.depth - 1)
        if x.shape[2] % stride or x.shape[3] % stride:
            raise ValueError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by {stride}")
        t_arr = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if len(t_arr) == 1 and x.shape[0] > 1:
            t_arr = t_arr.expand(x.shape[0])
        emb = sinusoidal_time_embedding(t_arr, cfg.time_embed_dim).to(x.dtype)
        temb = self.time_act(self.time_lin(emb))
        tokens = ctx.tokens if ctx is not None else None

        skips = []
        h = x
        for i in range(cfg.depth):
            h = self.enc[i](h, temb)
            if i < cfg.depth - 1:
                skips.append(h)
                h = self.down[i](h)
        for lvl in self.decoder:
            h = lvl(h, skips.pop(), temb, tokens)
        return torch.sigmoid(self.head(h))


def _respaced_timesteps(T: int, steps: int) -> list[int]:
    """Evenly spaced 1-based timesteps from T down to 1, inclusive."""
    if steps == T:
        return list(range(T, 0, -1))
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def posterior_coefficients(
    sched: NoiseSchedule, t: int, prev_t: int
) -> tuple[float, float, float]:
    """(coef_x0, coef_xt, variance) of the reverse transition t -> prev_t.

    ``prev_t = 0`` denotes the clean end of the chain (alpha_bar := 1), where
    the transition collapses onto the predicted clean image.
    """
    ab_t = float(sched.alpha_bars[t - 1])
    ab_prev = 1.0 if prev_t == 0 else float(sched.alpha_bars[prev_t - 1])
    alpha_eff = ab_t / ab_prev
    beta_eff = 1.0 - alpha_eff
    coef_x0 = np.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)
    coef_xt = np.sqrt(alpha_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
    return float(coef_x0), float(coef_xt), float(var)


def sample(
    denoise_fn,
    condition: torch.Tensor,
    ctx: ContextTokens | None,
    sched: NoiseSchedule,
    seed: int = 0,
    steps: int | None = None,
) -> torch.Tensor:
    """Ancestral sampling from pure noise, conditioned on the coarse output.

    ``denoise_fn(x_t, t, condition, ctx)`` must return the predicted clean
    image. Deterministic given the seed; with ``steps < T`` the chain visits
    an evenly spaced subset of timesteps with the transition recomputed from
    the cumulative noise products.
    """
    steps = sched.T if steps is None else steps
    if not 1 <= steps <= sched.T:
        raise ValueError(f"steps must lie in 1..{sched.T}, got {steps}")
    ts = _respaced_timesteps(sched.T, steps)
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = torch.from_numpy(
        rng.standard_normal(tuple(condition.shape), dtype=np.float64).astype(np.float32)
    ).to(condition.dtype)
    with torch.no_grad():
        for i, t in enumerate(ts):
            prev_t = ts[i + 1] if i + 1 < len(ts) else 0
            x0 = denoise_fn(x, t, condition, ctx)
            coef_x0, coef_xt, var = posterior_coefficients(sched, t, prev_t)
            x = coef_x0 * x0 + coef_xt * x
            if prev_t > 0 and var > 0.0:
                z = torch.from_numpy(
                    rng.standard_normal(tuple(x.shape), dtype=np.float64).astype(np.float32)
                ).to(x.dtype)
                x = x + float(np.sqrt(var)) * z
    return torch.clamp(x, 0.0, 1.0)


def export_attention_map(
    model: DenoiserUNet,
    x_t: torch.Tensor,
    t: int,
    condition: torch.Tensor,
    ctx: ContextTokens,
    level: int,
) -> ImageBuffer:
    """Attention received by each context token, rendered at image size.

    Softmax weights of the chosen block are averaged over query positions,
    reshaped to the token grid, bilinearly upsampled, and min-max normalized
    (a constant map is clamped as-is).
    """
    block = model.attention_block(level)
    block.capture_weights = True
    try:
        model(x_t, t, condition, ctx)
    finally:
        block.capture_weights = False
    weights = block.last_weights
    if weights is None or weights.shape[0] != 1:
        raise ValueError("attention export expects a single-image batch")
    per_token = weights[0].mean(dim=0)  # (n_tokens,)
    th, tw = ctx.grid
    grid = per_token.reshape(th, tw).cpu().numpy().astype(np.float32)
    up = resize_bilinear(ImageBuffer(grid), x_t.shape[2], x_t.shape[3])
    lo, hi = float(up.data.min()), float(up.data.max())
    if hi - lo > 1e-12:
        return ImageBuffer((up.data - lo) / (hi - lo))
    return ImageBuffer(np.clip(up.data, 0.0, 1.0))
