"""Joint end-to-end training of every stage under the summed objective.

All randomness is drawn from counter-based streams keyed by (seed, purpose,
step, item), so runs are bitwise reproducible, resume is exact without
serializing generator state, and batch composition is order-independent.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .data import TrainSample
from .image_io import ImageBuffer
from .layers import image_to_tensor, tensor_to_image
from .metrics import psnr as psnr_metric
from .metrics import rmse as rmse_metric
from .metrics import ssim as ssim_metric
from .params import ParamStore, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, ShadowRemovalModel

# purpose tags for the random streams
_TAG_AUGMENT = 1
_TAG_TIMESTEP = 2
_TAG_NOISE = 3
_TAG_EVAL = 4

LOG_HEADER = ("step", "loss", "l_base", "l_refine", "psnr", "ssim", "rmse")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-4
    batch_size: int = 2
    resolution: int = 64
    max_iters: int = 2000
    seed: int = 0
    augment: bool = True
    ablate_condition: bool = False
    ablate_adjustment: bool = False

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        blob = json.loads(Path(path).read_text())
        unknown = set(blob) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**blob)

    def to_json(self, path: str | Path) -> None:
        blob = asdict(self)
        blob["betas"] = list(self.betas)
        Path(path).write_text(json.dumps(blob, indent=2) + "\n")


@dataclass
class TrainState:
    step: int
    model: ShadowRemovalModel
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    train_cfg: TrainConfig
    model_cfg: PipelineConfig
    last_grad_norms: dict[str, float] = field(default_factory=dict)

    def params(self) -> ParamStore:
        return ParamStore.from_module(self.model)


def _stream(seed: int, tag: int, step: int = 0, item: int = 0) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, tag], counter=[step, item, 0, 0])
    )


def _eval_seed(seed: int, step: int, item: int) -> int:
    return int(np.random.SeedSequence((seed, _TAG_EVAL, step, item)).generate_state(1)[0])


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    m: dict[str, torch.Tensor],
    v: dict[str, torch.Tensor],
    step: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> None:
    """One decoupled-weight-decay adaptive-moment update, in place.

    Parameters without a gradient are left untouched (and undecayed).
    ``step`` is 1-based so bias correction is exact on the first update.
    """
    b1, b2 = betas
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    with torch.no_grad():
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            if not torch.isfinite(g).all():
                raise ValueError(f"non-finite gradient for {name}")
            p = params[name]
            m[name].mul_(b1).add_(g, alpha=1.0 - b1)
            v[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m[name] / bc1
            v_hat = v[name] / bc2
            p.add_(m_hat / (v_hat.sqrt() + eps) + weight_decay * p, alpha=-lr)


def apply_augment(sample: TrainSample, k: int, top: int, left: int, resolution: int) -> TrainSample:
    """Rotate by k quarter-turns then crop a resolution-sized square; the
    same transform hits the shadow image, the clean image, and the mask."""

    def xform(img: ImageBuffer | None) -> ImageBuffer | None:
        if img is None:
            return None
        arr = np.rot90(img.data, k, axes=(0, 1))
        h, w = arr.shape[:2]
        if h < top + resolution or w < left + resolution:
            raise ValueError(f"image {h}x{w} smaller than crop {resolution} at ({top}, {left})")
        return ImageBuffer(np.ascontiguousarray(arr[top : top + resolution, left : left + resolution]))

    return TrainSample(
        shadow=xform(sample.shadow),
        clean=xform(sample.clean),
        shadow_mask=xform(sample.shadow_mask),
        provenance=sample.provenance + f":aug(k={k},top={top},left={left})",
    )


def augment(sample: TrainSample, resolution: int, rng: np.random.Generator) -> TrainSample:
    """Random quarter-turn rotation followed by a random crop."""
    if sample.shadow.height < resolution or sample.shadow.width < resolution:
        raise ValueError(
            f"sample {sample.shadow.height}x{sample.shadow.width} smaller than crop {resolution}"
        )
    k = int(rng.integers(0, 4))
    h, w = sample.shadow.height, sample.shadow.width
    if k % 2 == 1:
        h, w = w, h
    top = int(rng.integers(0, h - resolution + 1))
    left = int(rng.integers(0, w - resolution + 1))
    return apply_augment(sample, k, top, left, resolution)


def _center_crop(sample: TrainSample, resolution: int) -> TrainSample:
    if (sample.shadow.height, sample.shadow.width) == (resolution, resolution):
        return sample
    top = (sample.shadow.height - resolution) // 2
    left = (sample.shadow.width - resolution) // 2
    return apply_augment(sample, 0, top, left, resolution)


def prepare_batch(
    cfg: TrainConfig, data: list[TrainSample], step: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Deterministic batch for a 1-based step: cyclic sample order, per-item
    augmentation streams."""
    xs, ys = [], []
    for j in range(cfg.batch_size):
        sample = data[((step - 1) * cfg.batch_size + j) % len(data)]
        if cfg.augment:
            sample = augment(sample, cfg.resolution, _stream(cfg.seed, _TAG_AUGMENT, step, j))
        else:
            sample = _center_crop(sample, cfg.resolution)
        xs.append(image_to_tensor(sample.shadow))
        ys.append(image_to_tensor(sample.clean))
    return torch.cat(xs, dim=0), torch.cat(ys, dim=0)


def draw_step_noise(
    cfg: TrainConfig, model: ShadowRemovalModel, step: int, shape: tuple[int, ...]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-item diffusion timesteps and Gaussian noise for one step."""
    b = shape[0]
    ts, noises = [], []
    for j in range(b):
        t_rng = _stream(cfg.seed, _TAG_TIMESTEP, step, j)
        ts.append(int(t_rng.integers(1, model.schedule.T + 1)))
        n_rng = _stream(cfg.seed, _TAG_NOISE, step, j)
        noises.append(
            torch.from_numpy(
                n_rng.standard_normal(shape[1:], dtype=np.float64).astype(np.float32)
            )
        )
    return torch.tensor(ts, dtype=torch.long), torch.stack(noises, dim=0)


def gradient_norms_by_group(grads: dict[str, torch.Tensor | None]) -> dict[str, float]:
    from .pipeline import parameter_group

    norms: dict[str, float] = {}
    for name, g in grads.items():
        if g is None:
            continue
        group = parameter_group(name)
        norms[group] = norms.get(group, 0.0) + float((g**2).sum())
    return {k: math.sqrt(s) for k, s in norms.items()}


def total_loss(state: TrainState, data: list[TrainSample], step: int) -> dict[str, torch.Tensor]:
    """Joint objective on the deterministic batch for a 1-based step.

    Returns the summed loss plus its per-term breakdown (and the stage
    outputs), all inside one differentiable graph.
    """
    x, y = prepare_batch(state.train_cfg, data, step)
    t, noise = draw_step_noise(state.train_cfg, state.model, step, tuple(y.shape))
    return state.model.training_losses(x, y, t, noise)


def train_step(state: TrainState, data: list[TrainSample]) -> dict[str, float]:
    """Advance one optimization step; returns the logged scalars."""
    cfg = state.train_cfg
    step = state.step + 1
    losses = total_loss(state, data, step)

    named = dict(state.model.named_parameters())
    ordered = sorted(named)
    grads = torch.autograd.grad(
        losses["loss"], [named[n] for n in ordered], allow_unused=True
    )
    grad_map = dict(zip(ordered, grads))
    adamw_step(
        named,
        grad_map,
        state.m,
        state.v,
        step,
        lr=cfg.lr,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
    )
    state.step = step
    state.last_grad_norms = gradient_norms_by_group(grad_map)
    return {
        "step": step,
        "loss": losses["loss"].item(),
        "l_base": losses["l_base"].item(),
        "l_refine": losses["l_refine"].item(),
    }


def evaluate(
    model: ShadowRemovalModel,
    samples: list[TrainSample],
    steps: int | None = None,
    seed: int = 0,
    eval_step: int = 0,
) -> dict[str, float]:
    """Full-pipeline metrics (ancestral sampling) averaged over samples."""
    ps, ss, rs = [], [], []
    for i, sample in enumerate(samples):
        out = model.refine(
            image_to_tensor(sample.shadow),
            steps=steps,
            seed=_eval_seed(seed, eval_step, i),
        )
        pred = tensor_to_image(out)
        ps.append(psnr_metric(pred, sample.clean))
        ss.append(ssim_metric(pred, sample.clean))
        rs.append(rmse_metric(pred, sample.clean))
    return {
        "psnr": float(np.mean(ps)),
        "ssim": float(np.mean(ss)),
        "rmse": float(np.mean(rs)),
    }


def init_state(
    cfg: TrainConfig, model_cfg: PipelineConfig | None = None
) -> TrainState:
    model_cfg = model_cfg if model_cfg is not None else PipelineConfig()
    model_cfg = replace(
        model_cfg,
        ablate_condition=cfg.ablate_condition,
        ablate_adjustment=cfg.ablate_adjustment,
    )
    div = model_cfg.spatial_divisor()
    if cfg.resolution % div != 0:
        raise ValueError(f"resolution {cfg.resolution} not divisible by {div}")
    model = ShadowRemovalModel(model_cfg, seed=cfg.seed)
    m = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    v = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    return TrainState(step=0, model=model, m=m, v=v, train_cfg=cfg, model_cfg=model_cfg)


def train_loop(
    cfg: TrainConfig,
    data: list[TrainSample],
    model_cfg: PipelineConfig | None = None,
    out_dir: str | Path | None = None,
    eval_every: int = 200,
    eval_data: list[TrainSample] | None = None,
    eval_steps: int | None = None,
    state: TrainState | None = None,
    verbose: bool = False,
) -> tuple[TrainState, list[dict]]:
    """Run cfg.max_iters optimization steps (resuming from ``state`` if
    given), with periodic held-out evaluation and CSV logging."""
    if not data:
        raise ValueError("training data is empty")
    if state is None:
        state = init_state(cfg, model_cfg)
    else:
        state.train_cfg = cfg  # resume continues under the caller's budget
    eval_data = eval_data if eval_data is not None else data
    rows: list[dict] = []
    while state.step < cfg.max_iters:
        row = train_step(state, data)
        if eval_every > 0 and (state.step % eval_every == 0 or state.step == cfg.max_iters):
            row.update(
                evaluate(
                    state.model, eval_data, steps=eval_steps,
                    seed=cfg.seed, eval_step=state.step,
                )
            )
        rows.append(row)
        if verbose and (state.step % 50 == 0 or "psnr" in row):
            extra = f" psnr={row['psnr']:.2f}" if "psnr" in row else ""
            print(f"step {row['step']}: loss={row['loss']:.5f}{extra}", flush=True)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_log(rows, out_dir / "log.csv")
        save_train_state(state, out_dir / "state")
        from .pipeline import save_model

        save_model(state.model, out_dir / "model.ckpt")
    return state, rows


def write_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for row in rows:
            writer.writerow([row.get(k, "") for k in LOG_HEADER])


def save_train_state(state: TrainState, out_dir: str | Path) -> None:
    """Everything needed to resume bit-identically: parameters, optimizer
    moments, and the step counter (random streams are counter-based)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(state.params(), out_dir / "params.ckpt")
    moments = {f"m.{n}": t for n, t in state.m.items()}
    moments.update({f"v.{n}": t for n, t in state.v.items()})
    save_checkpoint(ParamStore(moments), out_dir / "moments.ckpt")
    blob = {
        "step": state.step,
        "train_config": {**asdict(state.train_cfg), "betas": list(state.train_cfg.betas)},
        "model_config": asdict(state.model_cfg),
    }
    (out_dir / "state.json").write_text(json.dumps(blob, indent=2) + "\n")


def load_train_state(out_dir: str | Path) -> TrainState:
    out_dir = Path(out_dir)
    blob = json.loads((out_dir / "state.json").read_text())
    train_cfg = TrainConfig(**blob["train_config"])
    model_blob = dict(blob["model_config"])
    from .contrast import ContrastConfig

    model_cfg = PipelineConfig(
        contrast=ContrastConfig(**model_blob.pop("contrast")), **model_blob
    )
    model = ShadowRemovalModel(model_cfg, seed=train_cfg.seed)
    params = load_checkpoint(out_dir / "params.ckpt")
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(params[name])
    moments = load_checkpoint(out_dir / "moments.ckpt")
    m = {n: moments[f"m.{n}"].clone() for n, _ in model.named_parameters()}
    v = {n: moments[f"v.{n}"].clone() for n, _ in model.named_parameters()}
    return TrainState(
        step=blob["step"], model=model, m=m, v=v, train_cfg=train_cfg, model_cfg=model_cfg
    )
