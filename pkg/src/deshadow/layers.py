"""Neural building blocks shared by the coarse and refinement networks.

Thin functional wrappers (conv2d, group_norm, softmax_rows) pin the exact
numerics the tests verify against naive oracles; the module classes compose
them into the conv blocks and the single-head cross-attention used for
conditioning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .image_io import ImageBuffer


def conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Standard cross-correlation with zero padding on (B, C, H, W) input."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"expected 4-d input and weight, got {x.ndim}-d and {weight.ndim}-d")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def group_norm(
    x: torch.Tensor,
    groups: int,
    gamma: torch.Tensor,
    beta: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Per-group standardization followed by an affine map."""
    channels = x.shape[1]
    if channels % groups != 0:
        raise ValueError(f"{channels} channels not divisible by {groups} groups")
    return F.group_norm(x, groups, gamma, beta, eps)


def softmax_rows(m: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last dimension."""
    shifted = m - m.max(dim=-1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=-1, keepdim=True)


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sin/cos positional features of integer timesteps, shape (B, dim)."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    )
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def image_to_tensor(img: ImageBuffer) -> torch.Tensor:
    """(H, W, C) buffer -> (1, C, H, W) float32 tensor."""
    return torch.from_numpy(img.data.copy()).permute(2, 0, 1).unsqueeze(0)


def batch_to_tensor(imgs: list[ImageBuffer]) -> torch.Tensor:
    return torch.cat([image_to_tensor(im) for im in imgs], dim=0)


def tensor_to_image(x: torch.Tensor) -> ImageBuffer:
    """(C, H, W) or (1, C, H, W) tensor -> image buffer."""
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    arr = x.detach().permute(1, 2, 0).cpu().numpy().astype(np.float32)
    return ImageBuffer(arr)


def norm_groups_for(channels: int, norm_groups: int) -> int:
    return channels if channels < norm_groups else norm_groups


class ConvBlock(nn.Module):
    """Two conv -> group norm -> SiLU stages, with an optional additive
    per-channel time-embedding bias after the first stage."""

    def __init__(self, in_channels: int, out_channels: int, norm_groups: int = 8,
                 time_dim: int | None = None):
        super().__init__()
        g = norm_groups_for(out_channels, norm_groups)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(g, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(g, out_channels)
        self.act = nn.SiLU()
        self.temb_proj = nn.Linear(time_dim, out_channels) if time_dim else None

    def forward(self, x: torch.Tensor, temb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        if self.temb_proj is not None:
            if temb is None:
                raise ValueError("block was built with a time embedding but none was given")
            h = h + self.temb_proj(temb)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


@dataclass(frozen=True)
class AttentionBlockConfig:
    query_channels: int
    context_dim: int
    inner_dim: int
    layer_index: int = 0

    def __post_init__(self):
        for name in ("query_channels", "context_dim", "inner_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")


class CrossAttentionBlock(nn.Module):
    """Single-head cross-attention from feature-map queries to context tokens.

    Queries come from a 1x1 conv over the feature map (spatial positions are
    the query tokens); keys/values are linear maps of the context tokens. The
    output projection starts at zero so an untrained block is the identity on
    its input (residual no-op), which keeps early training stable.

    Set ``capture_weights`` to stash the most recent softmax weight matrix
    (B, n_queries, n_tokens) in ``last_weights`` for visualization.
    """

    def __init__(self, cfg: AttentionBlockConfig):
        super().__init__()
        self.cfg = cfg
        self.to_q = nn.Conv2d(cfg.query_channels, cfg.inner_dim, 1)
        self.to_k = nn.Linear(cfg.context_dim, cfg.inner_dim, bias=False)
        self.to_v = nn.Linear(cfg.context_dim, cfg.inner_dim, bias=False)
        self.to_out = nn.Linear(cfg.inner_dim, cfg.query_channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)
        self.to_out.init_zero = True  # keep zero under global re-initialization
        self.capture_weights = False
        self.last_weights: torch.Tensor | None = None

    def forward(self, z: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.ndim != 3 or tokens.shape[-1] != self.cfg.context_dim:
            raise ValueError(
                f"expected (B, n, {self.cfg.context_dim}) tokens, got {tuple(tokens.shape)}"
            )
        b, c, h, w = z.shape
        q = self.to_q(z).reshape(b, self.cfg.inner_dim, h * w).transpose(1, 2)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        weights = softmax_rows(q @ k.transpose(1, 2) / math.sqrt(self.cfg.inner_dim))
        if self.capture_weights:
            self.last_weights = weights.detach()
        out = self.to_out(weights @ v)
        return z + out.transpose(1, 2).reshape(b, c, h, w)


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministically (re)initialize all conv/linear weights in a module.

    Kaiming-uniform weights, zero biases, in definition order from one seeded
    generator. Submodules flagged ``init_zero`` keep zero weights and biases.
    """
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if getattr(m, "init_zero", False):
                nn.init.zeros_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
                continue
            nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5.0), generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
