"""Losses, the video critic, freeze-respecting optimization, and the staged
training driver (single-frame stage -> 4x base -> grown 8x -> grown 16x).

Grown stages train only newly added blocks; every frozen parameter is
hash-checked per step. The adversarial term is used by base-style stages
only and is kept entirely out of growth stages.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError, TrainingDiverged
from .evaluate import psnr
from .tokenizer_model import (
    IMAGE_STAGE,
    StagePlan,
    TokenizerModel,
    attach_image_encoder,
    build,
    grow,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
)
from .video_data import Corpus, VideoClip

STAGE_KINDS = ("image", "base", "growth")


@dataclass
class LossWeights:
    """Objective weighting. The adversarial weight is 0.1 for base-style
    stages and must be 0 for grown stages; the perceptual hook is off by
    default and pluggable."""

    rec: float = 1.0
    kl: float = 1e-12
    gan: float = 0.1
    perceptual: float = 0.0

    @classmethod
    def for_kind(cls, kind: str) -> "LossWeights":
        if kind not in STAGE_KINDS:
            raise ConfigError(f"unknown stage kind {kind!r}")
        return cls(gan=0.1 if kind == "base" else 0.0)

    def validate_for(self, grown: bool) -> None:
        if grown and self.gan > 0:
            raise ConfigError("adversarial weight must be 0 for grown stages")

    def combine(self, rec, kl, gan=0.0, perceptual=0.0):
        total = self.rec * rec + self.kl * kl
        if self.gan:
            total = total + self.gan * gan
        if self.perceptual:
            total = total + self.perceptual * perceptual
        return total


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 0
    grad_clip: float = 1.0

    def make(self, params) -> torch.optim.Adam:
        return torch.optim.Adam(
            params, lr=self.lr, betas=(self.beta1, self.beta2), weight_decay=self.weight_decay
        )


@dataclass
class StageConfig:
    kind: str
    out_dir: Path
    seed: int = 0
    holdout: int = 0
    eval_every: int = 500
    eval_clips: int = 8
    verify_freeze: bool = True
    checkpoint_name: str = "model.ckpt"
    optim: OptimConfig = field(default_factory=OptimConfig)
    losses: LossWeights | None = None

    def resolved_losses(self) -> LossWeights:
        return self.losses if self.losses is not None else LossWeights.for_kind(self.kind)


# ------------------------------------------------------------------- losses


def rec_loss(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over all elements."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).abs().mean()


def kl_loss(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean over elements of the closed-form divergence to N(0, 1):
    (mu^2 + e^logvar - 1 - logvar) / 2."""
    if mean.shape != logvar.shape:
        raise ShapeError(f"shape mismatch {tuple(mean.shape)} vs {tuple(logvar.shape)}")
    return 0.5 * (mean.square() + logvar.exp() - 1.0 - logvar).mean()


def gan_losses(critic: nn.Module, x: torch.Tensor, x_hat: torch.Tensor):
    """Hinge objective: (critic loss on real + detached fake, generator loss)."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    d_loss = F.relu(1.0 - critic(x)).mean() + F.relu(1.0 + critic(x_hat.detach())).mean()
    g_loss = -critic(x_hat).mean()
    return d_loss, g_loss


def total_loss(weights: LossWeights, mean, logvar, x, x_hat, critic=None,
               grown: bool = False, perceptual_fn=None) -> torch.Tensor:
    """Weighted objective; growth stages contain no adversarial term."""
    weights.validate_for(grown)
    rec = rec_loss(x, x_hat)
    kl = kl_loss(mean, logvar)
    gan = -critic(x_hat).mean() if (weights.gan > 0 and critic is not None) else 0.0
    perc = perceptual_fn(x, x_hat) if (weights.perceptual > 0 and perceptual_fn) else 0.0
    return weights.combine(rec, kl, gan, perc)


class Discriminator(nn.Module):
    """Patch critic over space and time: the standard 2D conv stack with the
    2D convs replaced by 3D ones."""

    def __init__(self, in_channels=3, base=32, layers=3):
        super().__init__()
        blocks = [
            nn.Conv3d(in_channels, base, kernel_size=(3, 4, 4), stride=(1, 2, 2), padding=(1, 1, 1)),
            nn.LeakyReLU(0.2),
        ]
        ch = base
        for i in range(1, layers):
            nxt = min(base * 2 ** i, 256)
            blocks += [
                nn.Conv3d(ch, nxt, kernel_size=(3, 4, 4), stride=(2, 2, 2), padding=(1, 1, 1)),
                nn.GroupNorm(min(8, nxt), nxt),
                nn.LeakyReLU(0.2),
            ]
            ch = nxt
        blocks.append(nn.Conv3d(ch, 1, kernel_size=(3, 4, 4), stride=1, padding=(1, 1, 1)))
        self.net = nn.Sequential(*blocks)

    def forward(self, x):
        return self.net(x)


# ------------------------------------------------------------------ batching


class BatchSampler:
    """Deterministic with-replacement sampling of clip (or frame) batches."""

    def __init__(self, corpus: Corpus, batch_size: int, seed: int, frames_only: bool = False):
        if len(corpus) == 0:
            raise ConfigError("cannot sample from an empty corpus")
        self.corpus = corpus
        self.batch_size = batch_size
        self.frames_only = frames_only
        self.rng = np.random.default_rng([seed, 0xBA7C4])

    def next_batch(self) -> torch.Tensor:
        idx = self.rng.integers(0, len(self.corpus), size=self.batch_size)
        tensors = []
        for i in idx:
            frames = self.corpus.clip(int(i)).frames
            if self.frames_only:
                t = int(self.rng.integers(0, frames.shape[0]))
                frames = frames[t:t + 1]
            tensors.append(torch.from_numpy(frames).permute(1, 0, 2, 3))
        return torch.stack(tensors, dim=0)


# ------------------------------------------------------------------ training


def _setup_logger(out_dir: Path) -> logging.Logger:
    logger = logging.getLogger(f"progtok.{out_dir.name}.{id(out_dir)}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    fh = logging.FileHandler(out_dir / "train.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logger.addHandler(fh)
    logger.propagate = False
    return logger


def _eval_psnr(model: TokenizerModel, clips: list[VideoClip]) -> float:
    model.eval()
    values = []
    with torch.no_grad():
        for clip in clips:
            recon, _ = reconstruct(model, clip)
            values.append(psnr(clip.frames, recon.frames))
    model.train()
    return float(np.mean(values)) if values else float("nan")


def train_stage(model: TokenizerModel, corpus: Corpus, cfg: StageConfig,
                parent_hash: str | None = None, perceptual_fn=None) -> Path:
    """Run one training stage and write metrics + a checkpoint.

    For grown stages every frozen parameter is bit-identical before and
    after (hash-asserted per step when `verify_freeze`).
    """
    if cfg.kind not in STAGE_KINDS:
        raise ConfigError(f"unknown stage kind {cfg.kind!r}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = _setup_logger(out_dir)

    grown = model.is_grown
    weights = cfg.resolved_losses()
    weights.validate_for(grown)
    if cfg.kind == "growth" and not grown:
        raise ConfigError("growth-stage training requires a grown model")
    if not grown and model.plan.level >= 1 and not model.plan.mixing:
        raise ConfigError("mixing=False is only legal for grown stages")

    train_c, eval_c = corpus.split_holdout(cfg.holdout) if cfg.holdout else (corpus, None)
    eval_clips = []
    if eval_c is not None and len(eval_c):
        count = min(cfg.eval_clips, len(eval_c))
        eval_clips = [eval_c.clip(i) for i in range(count)]
        if cfg.kind == "image":
            eval_clips = [VideoClip(c.frames[:1].copy(), fps=c.fps) for c in eval_clips]

    torch.manual_seed(cfg.seed)
    sampler = BatchSampler(train_c, cfg.optim.batch_size, cfg.seed,
                           frames_only=(cfg.kind == "image"))
    sample_gen = torch.Generator().manual_seed(cfg.seed + 1)

    trainable = model.trainable_parameters()
    if not trainable:
        raise ConfigError("nothing to train: every parameter is frozen")
    opt = cfg.optim.make(trainable)

    critic = None
    critic_opt = None
    if weights.gan > 0:
        critic = Discriminator(in_channels=model.plan.img_channels)
        critic_gen = torch.Generator().manual_seed(cfg.seed + 2)
        with torch.no_grad():
            for p in critic.parameters():
                if p.ndim > 1:
                    p.normal_(0.0, 0.02, generator=critic_gen)
                else:
                    p.zero_()
        critic_opt = replace(cfg.optim, weight_decay=1e-4).make(critic.parameters())

    frozen_hash = model.frozen_hash() if cfg.verify_freeze else None
    trainable_n, frozen_n = model.parameter_count()
    logger.info(
        "stage=%s steps=%d batch=%d trainable=%d frozen=%d gan=%g",
        cfg.kind, cfg.optim.steps, cfg.optim.batch_size, trainable_n, frozen_n, weights.gan,
    )

    metrics_path = out_dir / "metrics.csv"
    model.train()
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "rec", "kl", "gan", "d_loss", "psnr"])
        for step in range(cfg.optim.steps):
            x = sampler.next_batch()
            x_hat, mean, logvar = model(x, sample_gen=sample_gen)
            rec = rec_loss(x, x_hat)
            kl = kl_loss(mean, logvar)
            gan = -critic(x_hat).mean() if critic is not None else torch.zeros(())
            perc = perceptual_fn(x, x_hat) if (weights.perceptual > 0 and perceptual_fn) else 0.0
            loss = weights.combine(rec, kl, gan, perc)

            if not torch.isfinite(loss):
                snap = out_dir / "diverged.ckpt"
                save_checkpoint(model, snap, step=step, parent_hash=parent_hash)
                (out_dir / "diverged.json").write_text(json.dumps({
                    "step": step,
                    "loss": float(loss.detach()),
                    "rec": float(rec.detach()),
                    "kl": float(kl.detach()),
                }))
                raise TrainingDiverged(f"non-finite loss at step {step}; snapshot at {snap}")

            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(trainable, cfg.optim.grad_clip)
            opt.step()

            d_val = ""
            if critic is not None:
                d_loss = F.relu(1.0 - critic(x)).mean() + F.relu(1.0 + critic(x_hat.detach())).mean()
                critic_opt.zero_grad(set_to_none=True)
                d_loss.backward()
                critic_opt.step()
                d_val = f"{float(d_loss.detach()):.6f}"

            if cfg.verify_freeze and frozen_hash is not None:
                if model.frozen_hash() != frozen_hash:
                    raise TrainingDiverged(f"frozen parameters changed at step {step}")

            psnr_val = ""
            last = step == cfg.optim.steps - 1
            if eval_clips and (last or (cfg.eval_every and (step + 1) % cfg.eval_every == 0)):
                psnr_val = f"{_eval_psnr(model, eval_clips):.4f}"
                logger.info("step=%d loss=%.6f psnr=%s", step, float(loss.detach()), psnr_val)
            writer.writerow([
                step,
                f"{float(loss.detach()):.6f}",
                f"{float(rec.detach()):.6f}",
                f"{float(kl.detach()):.6e}",
                f"{float(gan.detach()) if critic is not None else 0.0:.6f}",
                d_val,
                psnr_val,
            ])

    ckpt = out_dir / cfg.checkpoint_name
    save_checkpoint(model, ckpt, step=cfg.optim.steps, parent_hash=parent_hash,
                    stage=IMAGE_STAGE if cfg.kind == "image" else None)
    logger.info("checkpoint written: %s", ckpt)
    return ckpt


# ------------------------------------------------------------------ pipeline


@dataclass
class PipelineConfig:
    corpus_dir: Path
    out_dir: Path
    plan: StagePlan = field(default_factory=StagePlan)
    steps_image: int = 2000
    steps_base: int = 20000
    steps_growth8: int = 5000
    steps_growth16: int = 5000
    batch_size: int = 8
    holdout: int = 64
    seed: int = 0
    eval_every: int = 500
    ablation: bool = False  # grow without the key-frame skip / conditioned norm


def run_pipeline(cfg: PipelineConfig) -> dict[str, Path]:
    """Chain image -> 4x -> 8x -> 16x; existing stage checkpoints are reused.

    Returns {"image", "4x", "8x", "16x"} -> checkpoint paths.
    """
    corpus = Corpus.open(cfg.corpus_dir)
    out = Path(cfg.out_dir)
    paths: dict[str, Path] = {}

    def stage_cfg(kind, name, steps) -> StageConfig:
        return StageConfig(
            kind=kind,
            out_dir=out / name,
            seed=cfg.seed,
            holdout=cfg.holdout,
            eval_every=cfg.eval_every,
            checkpoint_name=f"{name}.ckpt",
            optim=OptimConfig(batch_size=cfg.batch_size, steps=steps),
        )

    base_plan = StagePlan.from_dict({**cfg.plan.to_dict(), "k": 4, "mixing": True})

    image_ckpt = out / "image" / "image.ckpt"
    if not image_ckpt.exists():
        image_model = build(base_plan, seed=cfg.seed, with_image_encoder=False,
                            stage_override=IMAGE_STAGE)
        train_stage(image_model, corpus, stage_cfg("image", "image", cfg.steps_image))
    paths["image"] = image_ckpt

    base_ckpt = out / "base4x" / "base4x.ckpt"
    if not base_ckpt.exists():
        image_model, image_meta = load_checkpoint(image_ckpt)
        model = build(base_plan, seed=cfg.seed + 10)
        attach_image_encoder(model, image_model)
        train_stage(model, corpus, stage_cfg("base", "base4x", cfg.steps_base),
                    parent_hash=image_meta.file_hash)
    paths["4x"] = base_ckpt

    prev = base_ckpt
    for k, steps in ((8, cfg.steps_growth8), (16, cfg.steps_growth16)):
        name = f"grown{k}x" + ("_noskip" if cfg.ablation else "")
        ckpt = out / name / f"{name}.ckpt"
        if not ckpt.exists():
            parent, parent_meta = load_checkpoint(prev)
            plan = parent.plan.grown_to(k, mixing=not cfg.ablation)
            model = grow(parent, plan, seed=cfg.seed + k)
            train_stage(model, corpus, stage_cfg("growth", name, steps),
                        parent_hash=parent_meta.file_hash)
        paths[f"{k}x"] = ckpt
        prev = ckpt

    return paths
