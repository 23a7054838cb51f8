"""Staged encoder/decoder assembly and the grow operation.

A stage is identified by its temporal compression k in {4, 8, 16}. The base
4x model is a causal conv trunk (two joint spatial/temporal downsamples)
plus a 1x1x1 bottleneck producing mean/log-variance. Growing to 2k freezes
everything trained so far and adds: a key-frame-conditioned normalization,
one extra temporal downsample block, a fresh bottleneck conv, and one extra
temporal upsample block on the decoder side. The first latent frame always
comes from a frozen single-frame encoder trained beforehand on stills.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DivisibilityError, FormatError, ShapeError
from .nn_blocks import AdaNorm, CausalConv3d, EfficientUpsample, MFGroupNorm, ResidualUnit, TemporalDownsampleBlock
from .video_data import VideoClip

LOGVAR_MIN = -30.0
LOGVAR_MAX = 20.0

IMAGE_STAGE = "image"

CKPT_FORMAT = "progtok-checkpoint"
CKPT_VERSION = 1


def stage_label(k: int) -> str:
    return f"{k}x"


@dataclass(frozen=True)
class StagePlan:
    """Architecture descriptor for one compression stage.

    `mixing` switches the key-frame skip + conditioned norm in growth
    blocks; turning it off is only meaningful for grown stages (the staged
    training ablation).
    """

    k: int = 4
    spatial: int = 4
    latent_channels: int = 8
    widths: tuple[int, ...] = (32, 64, 128)
    res_units: int = 2
    mixing: bool = True
    img_channels: int = 3

    def __post_init__(self):
        if self.k not in (4, 8, 16):
            raise ConfigError(f"temporal compression k must be 4, 8 or 16, got {self.k}")
        if self.latent_channels not in (8, 16):
            raise ConfigError(f"latent_channels must be 8 or 16, got {self.latent_channels}")
        if len(self.widths) < 3:
            raise ConfigError("need at least 3 channel widths (two spatial levels)")
        if any(w < 1 for w in self.widths):
            raise ConfigError(f"bad channel widths {self.widths}")
        if self.spatial != 2 ** (len(self.widths) - 1):
            raise ConfigError(
                f"spatial compression {self.spatial} inconsistent with {len(self.widths)} widths"
            )
        if self.res_units < 1:
            raise ConfigError("res_units must be >= 1")
        if self.img_channels not in (1, 3):
            raise ConfigError("img_channels must be 1 or 3")
        if self.k == 4 and not self.mixing:
            raise ConfigError("mixing=False only applies to grown stages (k > 4)")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def level(self) -> int:
        """Number of growth steps on top of the 4x base (0, 1 or 2)."""
        return {4: 0, 8: 1, 16: 2}[self.k]

    @property
    def stage(self) -> str:
        return stage_label(self.k)

    def grown_to(self, k: int, mixing: bool | None = None) -> "StagePlan":
        return replace(self, k=k, mixing=self.mixing if mixing is None else mixing)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "spatial": self.spatial,
            "latent_channels": self.latent_channels,
            "widths": list(self.widths),
            "res_units": self.res_units,
            "mixing": self.mixing,
            "img_channels": self.img_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StagePlan":
        return cls(
            k=int(d["k"]),
            spatial=int(d["spatial"]),
            latent_channels=int(d["latent_channels"]),
            widths=tuple(int(w) for w in d["widths"]),
            res_units=int(d["res_units"]),
            mixing=bool(d["mixing"]),
            img_channels=int(d["img_channels"]),
        )


@dataclass
class LatentGrid:
    """Per-frame latent distribution: mean/logvar of shape [T_z, C_z, h, w]."""

    mean: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32)
        self.logvar = np.asarray(self.logvar, dtype=np.float32)
        if self.mean.shape != self.logvar.shape or self.mean.ndim != 4:
            raise ShapeError(
                f"mean/logvar must share a 4D shape, got {self.mean.shape} vs {self.logvar.shape}"
            )
        if not (np.isfinite(self.mean).all() and np.isfinite(self.logvar).all()):
            raise ShapeError("latent grid contains non-finite values")

    @property
    def latent_frames(self) -> int:
        return self.mean.shape[0]


def sample_latent(grid: LatentGrid, rng) -> np.ndarray:
    """Draw mean + exp(logvar/2) * eta with eta ~ N(0, 1) from `rng`.

    `rng` is a torch.Generator or an integer seed.
    """
    if isinstance(rng, int):
        gen = torch.Generator().manual_seed(rng)
    else:
        gen = rng
    eta = torch.randn(tuple(grid.mean.shape), generator=gen, dtype=torch.float32)
    sample = torch.from_numpy(grid.mean) + torch.exp(torch.from_numpy(grid.logvar) / 2.0) * eta
    return sample.numpy()


class EncoderTrunk(nn.Module):
    """Encoder blocks up to (not including) the bottleneck projection.

    Input [B, C, 1 + 4N, H, W] -> features [B, widths[-1], 1 + N, H/s, W/s].
    """

    def __init__(self, plan: StagePlan, num_groups=8):
        super().__init__()
        w = plan.widths
        self.stem = CausalConv3d(plan.img_channels, w[0], 3)
        blocks = []
        for i, width in enumerate(w):
            for _ in range(plan.res_units):
                blocks.append(ResidualUnit(width, num_groups=num_groups))
            if i < len(w) - 1:
                t_stride = 2 if i < 2 else 1
                blocks.append(CausalConv3d(width, w[i + 1], 3, stride=(t_stride, 2, 2)))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        x = self.stem(x)
        for block in self.blocks:
            x = block(x)
        return x


class GrowthEncoderBlock(nn.Module):
    """One growth step on the encoder side: conditioned norm (optional) plus
    the extra 2x temporal downsample."""

    def __init__(self, plan: StagePlan, num_groups=8):
        super().__init__()
        deep = plan.widths[-1]
        self.mixing = plan.mixing
        self.ada = AdaNorm(deep, deep, num_groups=num_groups) if plan.mixing else None
        self.down = TemporalDownsampleBlock(deep, res_units=plan.res_units, num_groups=num_groups)


class GrowthUpBlock(nn.Module):
    """Decoder-side growth step: extra 2x temporal upsample plus residual units."""

    def __init__(self, plan: StagePlan, num_groups=8):
        super().__init__()
        deep = plan.widths[-1]
        self.up = EfficientUpsample(deep, deep, temporal=True, spatial=False)
        self.units = nn.ModuleList(
            ResidualUnit(deep, num_groups=num_groups) for _ in range(plan.res_units)
        )

    def forward(self, x, tiler=None):
        x = self.up(x, tiler=tiler)
        for unit in self.units:
            x = unit(x, tiler=tiler)
        return x


class Decoder(nn.Module):
    """Latent -> pixels. Growth upsample blocks sit at the bottleneck end,
    newest first; the two joint spatial/temporal upsamples mirror the trunk."""

    def __init__(self, plan: StagePlan, num_groups=8):
        super().__init__()
        w = plan.widths
        deep = w[-1]
        self.conv_in = CausalConv3d(plan.latent_channels, deep, 3)
        self.growth_ups = nn.ModuleList(GrowthUpBlock(plan, num_groups) for _ in range(plan.level))
        self.mid = nn.ModuleList(
            ResidualUnit(deep, num_groups=num_groups) for _ in range(plan.res_units)
        )
        ups, units = [], []
        for i in range(len(w) - 2, -1, -1):
            ups.append(EfficientUpsample(w[i + 1], w[i], temporal=(i < 2), spatial=True))
            units.append(
                nn.ModuleList(ResidualUnit(w[i], num_groups=num_groups) for _ in range(plan.res_units))
            )
        self.ups = nn.ModuleList(ups)
        self.up_units = nn.ModuleList(units)
        self.norm_out = MFGroupNorm(w[0], num_groups=num_groups)
        self.conv_out = CausalConv3d(w[0], plan.img_channels, 3)

    def forward(self, z, tiler=None):
        x = _tiled(self.conv_in, z, tiler)
        for block in reversed(self.growth_ups):
            x = block(x, tiler=tiler)
        for unit in self.mid:
            x = unit(x, tiler=tiler)
        for up, units in zip(self.ups, self.up_units):
            x = up(x, tiler=tiler)
            for unit in units:
                x = unit(x, tiler=tiler)
        x = F.silu(self.norm_out(x))
        return _tiled(self.conv_out, x, tiler)


def _tiled(conv, x, tiler):
    return tiler.run_conv(conv, x) if tiler is not None else conv(x)


@dataclass
class ParamLineage:
    stage: str
    frozen: bool


def _subsample2(x: torch.Tensor) -> torch.Tensor:
    if (x.shape[2] - 1) % 2 != 0:
        raise DivisibilityError(f"cannot halve {x.shape[2]} frames; need T = 1 + 2M")
    return x[:, :, ::2]


class TokenizerModel(nn.Module):
    """The staged tokenizer. Every parameter carries a lineage tag
    (stage created, frozen flag); frozen parameters never receive updates."""

    def __init__(self, plan: StagePlan, with_image_encoder: bool = True, stage_override: str | None = None):
        super().__init__()
        self.plan = plan
        self.image_encoder_2d = EncoderTrunk(plan) if with_image_encoder else None
        self.trunk = EncoderTrunk(plan)
        self.growth_encoders = nn.ModuleList(GrowthEncoderBlock(plan) for _ in range(plan.level))
        deep = plan.widths[-1]
        self.bottlenecks = nn.ModuleList(
            nn.Conv3d(deep, 2 * plan.latent_channels, kernel_size=1) for _ in range(plan.level + 1)
        )
        self.decoder = Decoder(plan)

        stage = stage_override if stage_override is not None else plan.stage
        self.lineage: dict[str, ParamLineage] = {}
        for name, _ in self.named_parameters():
            if name.startswith("image_encoder_2d."):
                self.lineage[name] = ParamLineage(IMAGE_STAGE, frozen=True)
            else:
                self.lineage[name] = ParamLineage(stage, frozen=False)
        self.apply_freeze()

    # ---------------------------------------------------------------- setup

    def init_parameters(self, seed: int) -> None:
        """Deterministic init: conv weights ~ N(0, sqrt(2/fan_in)), biases and
        conditioning projections zero, norm gains one."""
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gamma"):
                    p.fill_(1.0)
                elif p.ndim == 1:
                    p.zero_()
                else:
                    fan_in = p[0].numel()
                    p.normal_(0.0, (2.0 / fan_in) ** 0.5, generator=gen)
            for module in self.modules():
                if isinstance(module, AdaNorm):
                    module.proj.weight.zero_()
                    module.proj.bias.zero_()

    def apply_freeze(self) -> None:
        for name, p in self.named_parameters():
            p.requires_grad_(not self.lineage[name].frozen)

    @property
    def has_image_encoder(self) -> bool:
        return self.image_encoder_2d is not None

    @property
    def is_grown(self) -> bool:
        return any(
            lin.frozen and lin.stage != IMAGE_STAGE for lin in self.lineage.values()
        )

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def frozen_names(self) -> list[str]:
        return sorted(n for n, lin in self.lineage.items() if lin.frozen)

    def frozen_hash(self) -> str:
        state = self.state_dict()
        digest = hashlib.sha256()
        for name in self.frozen_names():
            digest.update(name.encode())
            digest.update(state[name].detach().numpy().tobytes())
        return digest.hexdigest()

    def parameter_count(self) -> tuple[int, int]:
        """(trainable, frozen) parameter counts."""
        trainable = sum(p.numel() for p in self.parameters() if p.requires_grad)
        frozen = sum(p.numel() for p in self.parameters() if not p.requires_grad)
        return trainable, frozen

    # -------------------------------------------------------------- encoding

    def _trunk_features(self, x: torch.Tensor) -> torch.Tensor:
        f = self.trunk(x)
        if self.image_encoder_2d is not None:
            f0 = self.image_encoder_2d(x[:, :, :1])
            f = torch.cat([f0, f[:, :, 1:]], dim=2)
        return f

    def features(self, x: torch.Tensor, level: int | None = None) -> torch.Tensor:
        """Pre-bottleneck features at compression 4 * 2^level."""
        if level is None:
            level = self.plan.level
        if level == 0:
            return self._trunk_features(x)
        block = self.growth_encoders[level - 1]
        full = self.features(x, level - 1)
        if block.mixing:
            key = self.features(_subsample2(x), level - 1)
            inter = block.down(block.ada(full, key))
            return key + inter
        return block.down(full)

    def key_features(self, x: torch.Tensor) -> torch.Tensor:
        """The key-frame path of the current stage: previous-stage features of
        the 2x-subsampled input. Only defined for grown-architecture stages."""
        if self.plan.level == 0:
            raise ConfigError("the 4x base has no key-frame path")
        return self.features(_subsample2(x), self.plan.level - 1)

    def encode_tensors(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[B, C, T, H, W] -> (mean, logvar), each [B, C_z, 1+N, h, w]."""
        if x.shape[1] != self.plan.img_channels:
            raise ShapeError(f"expected {self.plan.img_channels} channels, got {x.shape[1]}")
        if (x.shape[2] - 1) % self.plan.k != 0:
            raise DivisibilityError(
                f"{x.shape[2]} frames invalid for {self.plan.k}x compression"
            )
        f = self.features(x)
        out = self.bottlenecks[self.plan.level](f)
        mean, logvar = out.chunk(2, dim=1)
        return mean, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)

    def decode_tensors(self, z: torch.Tensor, tiler=None) -> torch.Tensor:
        """Latent [B, C_z, T_z, h, w] -> raw pixels (unclamped)."""
        if z.shape[1] != self.plan.latent_channels:
            raise ShapeError(f"expected {self.plan.latent_channels} latent channels, got {z.shape[1]}")
        return self.decoder(z, tiler=tiler)

    def forward(self, x: torch.Tensor, sample_gen: torch.Generator | None = None):
        """Training pass: returns (raw reconstruction, mean, logvar)."""
        mean, logvar = self.encode_tensors(x)
        eta = torch.randn(mean.shape, generator=sample_gen, dtype=mean.dtype)
        z = mean + torch.exp(logvar / 2.0) * eta
        return self.decode_tensors(z), mean, logvar


# ------------------------------------------------------------------ clip API


def _clip_to_batch(clip: VideoClip) -> torch.Tensor:
    return torch.from_numpy(clip.frames).permute(1, 0, 2, 3).unsqueeze(0).contiguous()


def encode(model: TokenizerModel, clip: VideoClip) -> LatentGrid:
    clip.require_stage(model.plan.k)
    with torch.no_grad():
        mean, logvar = model.encode_tensors(_clip_to_batch(clip))
    to_grid = lambda t: t[0].permute(1, 0, 2, 3).numpy()
    return LatentGrid(mean=to_grid(mean), logvar=to_grid(logvar))


def decode(model: TokenizerModel, z, fps: int = 24, tiler=None) -> VideoClip:
    """`z` is a latent tensor [T_z, C_z, h, w] or a LatentGrid (its mean)."""
    if isinstance(z, LatentGrid):
        z = z.mean
    z = torch.as_tensor(np.asarray(z), dtype=torch.float32)
    if z.ndim != 4:
        raise ShapeError(f"latent must be [T_z, C_z, h, w], got {tuple(z.shape)}")
    zb = z.permute(1, 0, 2, 3).unsqueeze(0).contiguous()
    with torch.no_grad():
        raw = model.decode_tensors(zb, tiler=tiler)
    frames = raw[0].permute(1, 0, 2, 3).clamp(-1.0, 1.0).numpy()
    return VideoClip(frames=frames, fps=fps)


def reconstruct(model: TokenizerModel, clip: VideoClip) -> tuple[VideoClip, LatentGrid]:
    """Encode -> mean -> decode; deterministic (no sampling)."""
    grid = encode(model, clip)
    return decode(model, grid.mean, fps=clip.fps), grid


# ------------------------------------------------------------------- growing


def build(plan: StagePlan, seed: int = 0, with_image_encoder: bool = True,
          stage_override: str | None = None) -> TokenizerModel:
    model = TokenizerModel(plan, with_image_encoder=with_image_encoder, stage_override=stage_override)
    model.init_parameters(seed)
    return model


def attach_image_encoder(model: TokenizerModel, image_model: TokenizerModel) -> None:
    """Copy a trained single-frame model's trunk into the frozen image path."""
    if not model.has_image_encoder:
        raise ConfigError("model was built without an image encoder slot")
    model.image_encoder_2d.load_state_dict(image_model.trunk.state_dict())
    model.apply_freeze()


def grow(model: TokenizerModel, plan: StagePlan, seed: int = 0) -> TokenizerModel:
    """Copy + freeze every parameter of `model`, add the next stage's blocks
    with fresh weights (conditioning projections start at zero)."""
    if plan.k != 2 * model.plan.k:
        raise ConfigError(f"growth doubles k: {model.plan.k} -> {plan.k} is invalid")
    parent = model.plan
    same = (
        plan.widths == parent.widths
        and plan.latent_channels == parent.latent_channels
        and plan.spatial == parent.spatial
        and plan.res_units == parent.res_units
        and plan.img_channels == parent.img_channels
    )
    if not same:
        raise ConfigError("growth must preserve widths, latent channels and spatial layout")
    if parent.level >= 1 and plan.mixing != parent.mixing:
        raise ConfigError("growth cannot toggle mixing once growth blocks exist")

    grown = build(plan, seed=seed, with_image_encoder=model.has_image_encoder)
    parent_state = model.state_dict()
    with torch.no_grad():
        own = grown.state_dict()
        for name, tensor in parent_state.items():
            own[name].copy_(tensor)
    for name in grown.lineage:
        if name in model.lineage:
            grown.lineage[name] = ParamLineage(model.lineage[name].stage, frozen=True)
        else:
            grown.lineage[name] = ParamLineage(plan.stage, frozen=False)
    grown.apply_freeze()
    return grown


# --------------------------------------------------------------- checkpoints


@dataclass
class CheckpointMeta:
    plan: StagePlan
    stage: str
    step: int
    parent_hash: str | None
    with_image_encoder: bool
    path: Path | None = None
    file_hash: str | None = None
    lineage: dict[str, ParamLineage] = field(default_factory=dict)


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(model: TokenizerModel, path, step: int = 0,
                    parent_hash: str | None = None, stage: str | None = None) -> str:
    """Named-tensor zip archive plus a JSON header; returns the file hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CKPT_FORMAT,
        "version": CKPT_VERSION,
        "plan": model.plan.to_dict(),
        "stage": stage if stage is not None else _model_stage(model),
        "step": int(step),
        "parent_hash": parent_hash,
        "with_image_encoder": model.has_image_encoder,
    }
    lineage = {name: [lin.stage, lin.frozen] for name, lin in model.lineage.items()}
    state = model.state_dict()
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        zf.writestr("lineage.json", json.dumps(lineage, sort_keys=True))
        for name in sorted(state):
            buf = io.BytesIO()
            np.save(buf, state[name].detach().numpy())
            zf.writestr(f"tensors/{name}.npy", buf.getvalue())
    return file_sha256(path)


def _model_stage(model: TokenizerModel) -> str:
    stages = {lin.stage for lin in model.lineage.values() if not lin.frozen}
    return stages.pop() if len(stages) == 1 else model.plan.stage


def load_checkpoint(path) -> tuple[TokenizerModel, CheckpointMeta]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != CKPT_FORMAT:
                raise FormatError(f"{path}: not a tokenizer checkpoint")
            lineage_raw = json.loads(zf.read("lineage.json"))
            plan = StagePlan.from_dict(header["plan"])
            model = TokenizerModel(plan, with_image_encoder=header["with_image_encoder"])
            state = {}
            for name in model.state_dict():
                buf = io.BytesIO(zf.read(f"tensors/{name}.npy"))
                state[name] = torch.from_numpy(np.load(buf))
            model.load_state_dict(state, strict=True)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise FormatError(f"{path}: not a tokenizer checkpoint") from exc
    model.lineage = {
        name: ParamLineage(stage, bool(frozen)) for name, (stage, frozen) in lineage_raw.items()
    }
    model.apply_freeze()
    meta = CheckpointMeta(
        plan=plan,
        stage=header["stage"],
        step=int(header["step"]),
        parent_hash=header.get("parent_hash"),
        with_image_encoder=header["with_image_encoder"],
        path=path,
        file_hash=file_sha256(path),
        lineage=dict(model.lineage),
    )
    return model, meta
