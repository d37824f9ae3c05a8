"""The full shadow-removal model: coarse U-Net, contrast conditioning, and
the diffusion refiner, wired for joint end-to-end use.

Parameter naming is part of the contract: the coarse net lives under
``base.``, the heatmap adjuster under ``adjuster.``, the context encoder
under ``ctx.``, and the refiner under ``denoiser.`` with its cross-attention
blocks under ``...attn.``. Ablating the conditioning drops exactly the
``ctx.`` and ``attn.`` names and nothing else.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
from torch import nn

from .base_unet import BaseUNet, BaseUNetConfig, base_loss
from .contrast import ContrastAdjuster, ContrastConfig, extract_contrast_heatmap
from .diffusion import (
    ContextEncoder,
    ContextTokens,
    DenoiserConfig,
    DenoiserUNet,
    NoiseSchedule,
    build_schedule,
    forward_noise,
    sample,
)
from .image_io import ImageBuffer, resize_bilinear
from .layers import image_to_tensor, init_parameters, tensor_to_image

TOKEN_STRIDE = 8


class NonFiniteLossError(RuntimeError):
    """A loss term stopped being finite; carries the first bad term's name."""


@dataclass(frozen=True)
class PipelineConfig:
    image_channels: int = 3
    base_width: int = 16
    depth: int = 3
    norm_groups: int = 8
    timesteps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02
    time_embed_dim: int = 64
    context_dim: int = 32
    attn_inner_dim: int = 32
    contrast: ContrastConfig = field(default_factory=ContrastConfig)
    ablate_condition: bool = False
    ablate_adjustment: bool = False

    def base_config(self) -> BaseUNetConfig:
        return BaseUNetConfig(
            in_channels=self.image_channels,
            out_channels=self.image_channels,
            base_width=self.base_width,
            depth=self.depth,
            norm_groups=self.norm_groups,
        )

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            image_channels=self.image_channels,
            base_width=self.base_width,
            depth=self.depth,
            norm_groups=self.norm_groups,
            time_embed_dim=self.time_embed_dim,
            context_dim=self.context_dim,
            attn_inner_dim=self.attn_inner_dim,
            with_attention=not self.ablate_condition,
        )

    def spatial_divisor(self) -> int:
        return math.lcm(2 ** (self.depth - 1), TOKEN_STRIDE)

    def to_json(self, path: str | Path) -> None:
        blob = asdict(self)
        Path(path).write_text(json.dumps(blob, indent=2) + "\n")

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        blob = json.loads(Path(path).read_text())
        contrast = ContrastConfig(**blob.pop("contrast"))
        return cls(contrast=contrast, **blob)


def parameter_group(name: str) -> str:
    """Coarse trainable-parameter grouping used for logging and checks."""
    if ".attn." in name:
        return "attn"
    for prefix in ("base", "adjuster", "ctx", "denoiser"):
        if name.startswith(prefix + "."):
            return prefix
    return "other"


class ShadowRemovalModel(nn.Module):
    """Coarse remover + contrast-conditioned diffusion refiner."""

    def __init__(self, cfg: PipelineConfig = PipelineConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.base = BaseUNet(cfg.base_config())
        self.adjuster = ContrastAdjuster()
        if not cfg.ablate_condition:
            self.ctx = ContextEncoder(cfg.context_dim)
        self.denoiser = DenoiserUNet(cfg.denoiser_config())
        self.schedule: NoiseSchedule = build_schedule(
            cfg.timesteps, cfg.beta_start, cfg.beta_end
        )
        init_parameters(self, seed)

    def heatmaps(self, x: torch.Tensor) -> torch.Tensor:
        """Raw contrast heatmaps for a batch, stacked to (B, 1, H, W).

        Classical preprocessing: carries no gradient back to the input.
        """
        maps = []
        for i in range(x.shape[0]):
            img = tensor_to_image(x[i])
            rep = extract_contrast_heatmap(img, self.cfg.contrast)
            maps.append(torch.from_numpy(rep.heatmap.data.copy()).permute(2, 0, 1))
        return torch.stack(maps, dim=0).to(x.dtype)

    def conditioning(self, x: torch.Tensor) -> torch.Tensor | None:
        """The contrast signal the context encoder will consume, or None
        when conditioning is ablated."""
        if self.cfg.ablate_condition:
            return None
        raw = self.heatmaps(x)
        if self.cfg.ablate_adjustment:
            return raw
        return self.adjuster(raw)

    def context_tokens(self, x: torch.Tensor) -> ContextTokens | None:
        cond = self.conditioning(x)
        if cond is None:
            return None
        return self.ctx(cond)

    def training_losses(
        self,
        x: torch.Tensor,
        y: torch.Tensor,
        t: torch.Tensor,
        noise: torch.Tensor,
    ) -> dict[str, torch.Tensor]:
        """Joint objective: coarse MSE plus single-step refinement MSE.

        The refiner is trained on the noised ground truth at per-item steps
        ``t`` with the coarse prediction as its condition.
        """
        x_hat = self.base(x)
        l_base = base_loss(x_hat, y)
        tokens = self.context_tokens(x)
        x_t = forward_noise(y, t, noise, self.schedule)
        x0_pred = self.denoiser(x_t, t, x_hat, tokens)
        l_refine = ((y - x0_pred) ** 2).mean()
        for name, term in (("l_base", l_base), ("l_refine", l_refine)):
            if not torch.isfinite(term):
                raise NonFiniteLossError(f"{name} is non-finite: {term.item()}")
        return {
            "loss": l_base + l_refine,
            "l_base": l_base,
            "l_refine": l_refine,
            "x_hat": x_hat,
            "x0_pred": x0_pred,
        }

    def refine(
        self, x: torch.Tensor, steps: int | None = None, seed: int = 0
    ) -> torch.Tensor:
        """Coarse prediction followed by full ancestral refinement."""
        with torch.no_grad():
            x_hat = self.base(x)
            tokens = self.context_tokens(x)
        return sample(self.denoiser, x_hat, tokens, self.schedule, seed=seed, steps=steps)

    def remove_shadow(
        self, img: ImageBuffer, steps: int | None = None, seed: int = 0
    ) -> ImageBuffer:
        """End-to-end inference on one image of arbitrary size.

        Inputs are resized to the nearest valid working resolution (network
        stride times token stride) and the result is resized back.
        """
        div = self.cfg.spatial_divisor()
        work_h = max(div, int(round(img.height / div)) * div)
        work_w = max(div, int(round(img.width / div)) * div)
        work = img
        if (work_h, work_w) != (img.height, img.width):
            work = resize_bilinear(img, work_h, work_w)
        out = self.refine(image_to_tensor(work), steps=steps, seed=seed)
        result = tensor_to_image(out)
        if (work_h, work_w) != (img.height, img.width):
            result = resize_bilinear(result, img.height, img.width)
        return result

    def parameter_names(self) -> set[str]:
        return {name for name, _ in self.named_parameters()}


def build_model(cfg: PipelineConfig, seed: int = 0) -> ShadowRemovalModel:
    return ShadowRemovalModel(cfg, seed=seed)


def ablated(cfg: PipelineConfig, *, condition: bool = False, adjustment: bool = False) -> PipelineConfig:
    return replace(cfg, ablate_condition=condition, ablate_adjustment=adjustment)


def save_model(model: ShadowRemovalModel, path: str | Path) -> None:
    """Write the parameter checkpoint plus a ``<path>.json`` config sidecar."""
    from .params import ParamStore, save_checkpoint

    save_checkpoint(ParamStore.from_module(model), path)
    model.cfg.to_json(str(path) + ".json")


def load_model(path: str | Path) -> ShadowRemovalModel:
    """Rebuild a model from a checkpoint and its config sidecar."""
    from .params import load_checkpoint

    sidecar = Path(str(path) + ".json")
    if not sidecar.is_file():
        raise FileNotFoundError(
            f"missing config sidecar {sidecar} (written alongside every saved model)"
        )
    cfg = PipelineConfig.from_json(sidecar)
    model = ShadowRemovalModel(cfg, seed=0)
    params = load_checkpoint(path)
    loaded = set(params.names())
    expected = model.parameter_names()
    if loaded != expected:
        missing = sorted(expected - loaded)[:3]
        extra = sorted(loaded - expected)[:3]
        raise ValueError(f"checkpoint does not match config: missing={missing} extra={extra}")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(params[name])
    return model
