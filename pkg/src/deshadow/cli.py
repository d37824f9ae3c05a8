"""Batch command-line interface for the whole pipeline.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every source of
randomness is surfaced as a --seed flag, so reruns with identical flags
produce identical files.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from . import data as data_mod
from .contrast import adjust_contrast, extract_contrast_heatmap
from .image_io import load_image, save_image
from .layers import image_to_tensor
from .pipeline import PipelineConfig, load_model
from .train import TrainConfig, train_loop

_IMG_EXTS = {".png", ".ppm"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the contract wants 1
    def error(self, message: str):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="deshadow", description="Contrast-guided document shadow removal")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate paired synthetic document/shadow images")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--res", type=int, default=64, help="square resolution")
    p.add_argument("--seed", type=int, default=0, help="base seed; sample i uses seed+i")
    p.add_argument("--out", required=True, help="output root (shadow/, clean/, mask/)")

    p = sub.add_parser("extract-contrast", help="write raw (and adjusted) contrast heatmaps")
    p.add_argument("--in", dest="input", required=True, help="input image")
    p.add_argument("--ckpt", default=None, help="model checkpoint; enables the adjusted map")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="jointly train all stages")
    p.add_argument("--config", default=None, help="JSON training config (flat field names)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and log.csv")
    p.add_argument("--shadow-dir", default=None, help="paired data: shadowed images")
    p.add_argument("--clean-dir", default=None, help="paired data: ground-truth images")
    p.add_argument("--synth-n", type=int, default=8,
                   help="synthetic sample count when no paired dirs are given")
    p.add_argument("--ablate-condition", action="store_true",
                   help="train without the contrast conditioning path")
    p.add_argument("--ablate-adjustment", action="store_true",
                   help="condition on the raw heatmap instead of the adjusted one")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--resolution", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--eval-every", type=int, default=200)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--timesteps", type=int, default=50)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("infer", help="remove shadows from an image or directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="image file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default: full schedule)")
    p.add_argument("--seed", type=int, default=0, help="base seed; image i uses seed+i")

    p = sub.add_parser("eval", help="PSNR/SSIM/RMSE over filename-paired directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--res", type=int, default=768, help="evaluation resolution")
    p.add_argument("--out", default="metrics.csv", help="CSV report path")

    p = sub.add_parser("dump-attn", help="export a cross-attention heatmap")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True, help="input image")
    p.add_argument("--level", type=int, required=True, help="decoder level carrying attention")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_synth(args) -> int:
    out = Path(args.out)
    for sub in ("shadow", "clean", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    samples = data_mod.synth_dataset(args.n, base_seed=args.seed, resolution=args.res)
    for i, sample in enumerate(samples):
        name = f"{i:04d}.png"
        save_image(sample.shadow, out / "shadow" / name)
        save_image(sample.clean, out / "clean" / name)
        save_image(sample.shadow_mask, out / "mask" / name)
    print(f"wrote {len(samples)} sample(s) under {out}")
    return 0


def _cmd_extract_contrast(args) -> int:
    img = load_image(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem
    raw = extract_contrast_heatmap(img)
    save_image(raw.heatmap, out / f"{stem}_contrast_raw.png")
    written = [f"{stem}_contrast_raw.png"]
    if args.ckpt is not None:
        model = load_model(args.ckpt)
        adjusted = adjust_contrast(raw, model.adjuster)
        save_image(adjusted.heatmap, out / f"{stem}_contrast_adjusted.png")
        written.append(f"{stem}_contrast_adjusted.png")
    print(f"wrote {', '.join(written)} under {out}")
    return 0


def _merge_train_config(args) -> TrainConfig:
    cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    overrides = {}
    for flag, field_name in (
        ("lr", "lr"),
        ("batch_size", "batch_size"),
        ("max_iters", "max_iters"),
        ("resolution", "resolution"),
        ("seed", "seed"),
        ("augment", "augment"),
    ):
        value = getattr(args, flag)
        if value is not None:
            overrides[field_name] = value
    if args.ablate_condition:
        overrides["ablate_condition"] = True
    if args.ablate_adjustment:
        overrides["ablate_adjustment"] = True
    valid = {f.name for f in dataclass_fields(TrainConfig)}
    assert set(overrides) <= valid
    from dataclasses import replace

    return replace(cfg, **overrides)


def _cmd_train(args) -> int:
    cfg = _merge_train_config(args)
    model_cfg = PipelineConfig(
        base_width=args.base_width, depth=args.depth, timesteps=args.timesteps
    )
    if (args.shadow_dir is None) != (args.clean_dir is None):
        raise ValueError("--shadow-dir and --clean-dir must be given together")
    if args.shadow_dir is not None:
        samples = data_mod.load_paired_dir(args.shadow_dir, args.clean_dir)
    else:
        samples = data_mod.synth_dataset(args.synth_n, base_seed=cfg.seed,
                                         resolution=cfg.resolution)
    state, rows = train_loop(
        cfg,
        samples,
        model_cfg=model_cfg,
        out_dir=args.out,
        eval_every=args.eval_every,
        verbose=not args.quiet,
    )
    final = rows[-1] if rows else {}
    psnr = f" final psnr={final['psnr']:.2f}" if "psnr" in final else ""
    print(f"trained {state.step} step(s); artifacts under {args.out}{psnr}")
    return 0


def _list_inputs(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in _IMG_EXTS)
        if not files:
            raise ValueError(f"no PNG/PPM images in {path}")
        return files
    return [path]


def _cmd_infer(args) -> int:
    model = load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = _list_inputs(Path(args.input))
    for i, src in enumerate(inputs):
        img = load_image(src)
        result = model.remove_shadow(img, steps=args.steps, seed=args.seed + i)
        save_image(result, out / f"{src.stem}.png")
    print(f"wrote {len(inputs)} image(s) under {out}")
    return 0


def _cmd_eval(args) -> int:
    from .metrics import evaluate_dir

    report = evaluate_dir(args.pred, args.gt, args.res)
    csv_text = report.to_csv()
    Path(args.out).write_text(csv_text)
    sys.stdout.write(csv_text)
    return 0


def _cmd_dump_attn(args) -> int:
    import numpy as np
    import torch

    from .diffusion import export_attention_map

    model = load_model(args.ckpt)
    img = load_image(args.input)
    div = model.cfg.spatial_divisor()
    if img.height % div or img.width % div:
        from .image_io import resize_bilinear

        img = resize_bilinear(
            img,
            max(div, round(img.height / div) * div),
            max(div, round(img.width / div) * div),
        )
    x = image_to_tensor(img)
    with torch.no_grad():
        x_hat = model.base(x)
        ctx = model.context_tokens(x)
    if ctx is None:
        raise ValueError("this model was trained without conditioning; no attention to dump")
    t = model.schedule.T
    rng = np.random.Generator(np.random.Philox(key=args.seed))
    x_t = torch.from_numpy(rng.standard_normal(tuple(x.shape)).astype(np.float32))
    attn = export_attention_map(model.denoiser, x_t, t, x_hat, ctx, args.level)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{Path(args.input).stem}_attn_level{args.level}.png"
    save_image(attn, out / name)
    print(f"wrote {name} under {out}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "extract-contrast": _cmd_extract_contrast,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "dump-attn": _cmd_dump_attn,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit 2 with a diagnostic
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
