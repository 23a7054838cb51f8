"""Command-line surface.

Subcommands: gen-data, train-image, train-base, grow, train-growth, encode,
decode, reconstruct, eval, budget, tile-check. Every command accepts an
optional INI config plus `--set section.key=value` overrides; `--seed`
threads determinism everywhere. Exit codes: 0 success, 2 usage/config
errors, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .errors import ConfigError, TokenizerError
from .evaluate import eval_reconstruction, eval_subsampled_baseline, latent_budget, psnr
from .tiled_inference import chunked_reconstruct, tiled_decode
from .tokenizer_model import (
    IMAGE_STAGE,
    LatentGrid,
    StagePlan,
    attach_image_encoder,
    build,
    decode as model_decode,
    encode as model_encode,
    file_sha256,
    grow,
    load_checkpoint,
    sample_latent,
    save_checkpoint,
)
from .training import StageConfig, train_stage
from .video_data import Corpus, SynthSpec, generate_synthetic, load_clip, save_clip


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="override a config entry")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progtok",
                                     description="causal video tokenizer with grown temporal compression")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="render a synthetic bouncing-shapes corpus")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--frames", type=int, default=17)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--shapes", type=int, default=3)
    p.add_argument("--vmin", type=float, default=0.5)
    p.add_argument("--vmax", type=float, default=2.5)
    p.add_argument("--channels", type=int, default=3)

    p = sub.add_parser("train-image", help="train the single-frame autoencoder (stage 0)")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("train-base", help="train the 4x base model")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--image-ckpt", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--k", type=int, default=4,
                   help="target compression; >4 trains the direct (from-scratch) baseline")

    p = sub.add_parser("grow", help="grow a trained model to double compression")
    _add_common(p)
    p.add_argument("--parent", type=Path, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-mixing", action="store_true",
                   help="ablation wiring: no key-frame skip / conditioned norm")

    p = sub.add_parser("train-growth", help="train the newly added blocks of a grown model")
    _add_common(p)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--parent", type=Path, default=None, help="lower-stage checkpoint to grow first")
    p.add_argument("--model", type=Path, default=None, help="already-grown checkpoint")
    p.add_argument("--k", type=int, default=None, help="target compression when growing")
    p.add_argument("--no-mixing", action="store_true")
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("encode", help="encode an NVT clip to a latent .npz")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("decode", help="decode a latent .npz to an NVT clip")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--latent", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sample", action="store_true", help="sample instead of using the mean")
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=8)

    p = sub.add_parser("reconstruct", help="chunked encode/decode round trip of a clip")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--chunk-frames", type=int, default=17)
    p.add_argument("--chunk-overlap", type=int, default=4)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=8)

    p = sub.add_parser("eval", help="PSNR report over a corpus")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--chunk-frames", type=int, default=17)
    p.add_argument("--chunk-overlap", type=int, default=4)
    p.add_argument("--tile", type=int, default=None)
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--subsample-factor", type=int, default=1)
    p.add_argument("--no-timing", action="store_true",
                   help="write 0 in the seconds column (byte-reproducible reports)")

    p = sub.add_parser("budget", help="latent-frame count for a frame budget")
    _add_common(p)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--chunk", type=int, default=17)

    p = sub.add_parser("tile-check", help="compare tiled vs full decoding")
    _add_common(p)
    p.add_argument("--ckpt", type=Path, default=None, help="default: random model")
    p.add_argument("--tile", type=int, default=64)
    p.add_argument("--overlap", type=int, default=8)
    p.add_argument("--latent-frames", type=int, default=2)
    p.add_argument("--latent-h", type=int, default=72)
    p.add_argument("--latent-w", type=int, default=96)
    p.add_argument("--tolerance", type=float, default=1e-4)

    return parser


def _load_cfg(args):
    return cfgmod.apply_overrides(cfgmod.load_config(args.config), args.overrides)


def _cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    data = cfg.get("data", {})
    spec = SynthSpec(
        num_clips=int(data.get("clips", args.clips)),
        frames_per_clip=int(data.get("frames", args.frames)),
        resolution=int(data.get("res", args.res)),
        shapes=int(data.get("shapes", args.shapes)),
        velocity=(float(data.get("vmin", args.vmin)), float(data.get("vmax", args.vmax))),
        seed=args.seed,
        channels=int(data.get("channels", args.channels)),
    )
    corpus = generate_synthetic(spec, args.out)
    print(f"wrote {len(corpus)} clips to {args.out}")
    return 0


def _stage_config(args, cfg, kind, out_dir) -> StageConfig:
    return StageConfig(
        kind=kind,
        out_dir=out_dir,
        seed=args.seed,
        holdout=int(cfg.get("data", {}).get("holdout", 0)),
        eval_every=int(cfg.get("logging", {}).get("eval_every", 500)),
        checkpoint_name=f"{Path(out_dir).name}.ckpt",
        optim=cfgmod.optim_from_config(cfg, steps=getattr(args, "steps", None)),
        losses=cfgmod.losses_from_config(cfg, kind),
    )


def _cmd_train_image(args) -> int:
    cfg = _load_cfg(args)
    plan = cfgmod.plan_from_config(cfg, k=4, mixing=True)
    corpus = Corpus.open(args.corpus)
    model = build(plan, seed=args.seed, with_image_encoder=False, stage_override=IMAGE_STAGE)
    ckpt = train_stage(model, corpus, _stage_config(args, cfg, "image", args.out))
    print(f"image checkpoint: {ckpt}")
    return 0


def _cmd_train_base(args) -> int:
    cfg = _load_cfg(args)
    plan = cfgmod.plan_from_config(cfg, k=args.k, mixing=True)
    corpus = Corpus.open(args.corpus)
    image_model, image_meta = load_checkpoint(args.image_ckpt)
    model = build(plan, seed=args.seed + 10)
    attach_image_encoder(model, image_model)
    ckpt = train_stage(model, corpus, _stage_config(args, cfg, "base", args.out),
                       parent_hash=image_meta.file_hash)
    print(f"base checkpoint: {ckpt}")
    return 0


def _cmd_grow(args) -> int:
    parent, parent_meta = load_checkpoint(args.parent)
    plan = parent.plan.grown_to(args.k, mixing=not args.no_mixing)
    model = grow(parent, plan, seed=args.seed + args.k)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out, step=0, parent_hash=parent_meta.file_hash)
    trainable, frozen = model.parameter_count()
    print(f"grown to {plan.stage}: {trainable} trainable / {frozen} frozen parameters -> {args.out}")
    return 0


def _cmd_train_growth(args) -> int:
    cfg = _load_cfg(args)
    corpus = Corpus.open(args.corpus)
    if args.model is not None:
        model, meta = load_checkpoint(args.model)
        parent_hash = meta.parent_hash
    elif args.parent is not None:
        if args.k is None:
            raise ConfigError("--k is required when growing from --parent")
        parent, parent_meta = load_checkpoint(args.parent)
        plan = parent.plan.grown_to(args.k, mixing=not args.no_mixing)
        model = grow(parent, plan, seed=args.seed + args.k)
        parent_hash = parent_meta.file_hash
    else:
        raise ConfigError("train-growth needs --parent or --model")
    ckpt = train_stage(model, corpus, _stage_config(args, cfg, "growth", args.out),
                       parent_hash=parent_hash)
    print(f"growth checkpoint: {ckpt}")
    return 0


def _cmd_encode(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    clip = load_clip(args.input)
    grid = model_encode(model, clip)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(args.out, mean=grid.mean, logvar=grid.logvar, k=model.plan.k, fps=clip.fps)
    print(f"latent {grid.mean.shape} -> {args.out}")
    return 0


def _cmd_decode(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    data = np.load(args.latent)
    grid = LatentGrid(mean=data["mean"], logvar=data["logvar"])
    fps = int(data["fps"]) if "fps" in data else 24
    z = sample_latent(grid, args.seed) if args.sample else grid.mean
    if args.tile is not None:
        clip = tiled_decode(model, z, tile=args.tile, overlap=args.overlap, fps=fps)
    else:
        clip = model_decode(model, z, fps=fps)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_clip(clip, args.out)
    print(f"decoded {clip.num_frames} frames -> {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    clip = load_clip(args.input)
    recon, latents = chunked_reconstruct(
        model, clip, chunk_length=args.chunk_frames, chunk_overlap=args.chunk_overlap,
        tile=args.tile, tile_overlap=args.overlap,
    )
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_clip(recon, args.out)
    print(f"{clip.num_frames} frames -> {latents} latents, psnr {psnr(clip.frames, recon.frames):.2f} dB")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, meta = load_checkpoint(args.ckpt)
    corpus = Corpus.open(args.corpus)
    fingerprint = cfgmod.config_fingerprint(cfg, meta.file_hash.encode())
    if args.subsample_factor != 1:
        report = eval_subsampled_baseline(model, corpus, args.subsample_factor,
                                          timing=not args.no_timing, fingerprint=fingerprint)
        stem = f"eval_sub{args.subsample_factor}"
    else:
        report = eval_reconstruction(
            model, corpus, chunk_length=args.chunk_frames, chunk_overlap=args.chunk_overlap,
            tile=args.tile, tile_overlap=args.overlap,
            timing=not args.no_timing, fingerprint=fingerprint,
        )
        stem = "eval"
    csv_path, summary_path = report.write(args.out_dir, stem=stem)
    print(f"mean psnr {report.mean_psnr:.2f} dB over {len(report.rows)} clips "
          f"({report.skipped} skipped) -> {csv_path}")
    return 0


def _cmd_budget(args) -> int:
    report = latent_budget(args.frames, args.k, chunk_length=args.chunk)
    print(report.describe())
    return 0


def _cmd_tile_check(args) -> int:
    if args.ckpt is not None:
        model, _ = load_checkpoint(args.ckpt)
    else:
        model = build(StagePlan(k=4, widths=(8, 16, 32)), seed=args.seed)
    gen = torch.Generator().manual_seed(args.seed)
    z = torch.randn(
        (args.latent_frames, model.plan.latent_channels, args.latent_h, args.latent_w),
        generator=gen,
    )
    with torch.no_grad():
        full = model_decode(model, z)
        tiled = tiled_decode(model, z, tile=args.tile, overlap=args.overlap)
    deviation = float(np.abs(full.frames - tiled.frames).max())
    ok = deviation <= args.tolerance
    print(f"max tiled-vs-full deviation: {deviation:.3e} "
          f"({'PASS' if ok else 'FAIL'} at {args.tolerance:g})")
    return 0 if ok else 1


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train-image": _cmd_train_image,
    "train-base": _cmd_train_base,
    "grow": _cmd_grow,
    "train-growth": _cmd_train_growth,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "reconstruct": _cmd_reconstruct,
    "eval": _cmd_eval,
    "budget": _cmd_budget,
    "tile-check": _cmd_tile_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    try:
        return _HANDLERS[args.command](args)
    except ConfigError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 2
    except TokenizerError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
