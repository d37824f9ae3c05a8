"""Contrast-guided coarse-to-fine document shadow removal."""

from .contrast import (
    ContrastAdjuster,
    ContrastConfig,
    ContrastRepresentation,
    adjust_contrast,
    extract_contrast_heatmap,
)
from .data import SynthConfig, TrainSample, load_paired_dir, synth_dataset, synth_pair
from .diffusion import NoiseSchedule, build_schedule, forward_noise, sample
from .image_io import ImageBuffer, load_image, resize_bilinear, save_image, to_luminance
from .metrics import MetricReport, evaluate_dir, psnr, rmse, ssim
from .params import ParamStore, grad_check, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, ShadowRemovalModel, load_model, save_model
from .train import TrainConfig, TrainState, train_loop

__all__ = [
    "ContrastAdjuster",
    "ContrastConfig",
    "ContrastRepresentation",
    "ImageBuffer",
    "MetricReport",
    "NoiseSchedule",
    "ParamStore",
    "PipelineConfig",
    "ShadowRemovalModel",
    "SynthConfig",
    "TrainConfig",
    "TrainSample",
    "TrainState",
    "adjust_contrast",
    "build_schedule",
    "evaluate_dir",
    "extract_contrast_heatmap",
    "forward_noise",
    "grad_check",
    "load_checkpoint",
    "load_image",
    "load_model",
    "load_paired_dir",
    "psnr",
    "resize_bilinear",
    "rmse",
    "sample",
    "save_checkpoint",
    "save_image",
    "save_model",
    "ssim",
    "synth_dataset",
    "synth_pair",
    "to_luminance",
    "train_loop",
]
