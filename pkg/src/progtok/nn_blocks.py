"""Differentiable building blocks: causal 3D convolutions, mean-free group
normalization, conditioned (adaptive) normalization, and temporal resampling.

All blocks take [B, C, T, H, W] tensors. Temporal padding is applied only at
the sequence start (replicated first frame), so outputs never depend on
future frames. Normalization statistics are computed per temporal frame,
which keeps stacks of these blocks strictly causal and makes single-frame
inputs behave exactly like the first frame of a longer video.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DivisibilityError, ShapeError


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 3:
            raise ConfigError(f"expected 3 values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * 3


def causal_pad(x: torch.Tensor, k_t: int, dim: int = 0) -> torch.Tensor:
    """Prepend k_t - 1 copies of the first frame along `dim`."""
    if k_t < 1:
        raise ConfigError(f"temporal kernel must be >= 1, got {k_t}")
    if x.shape[dim] < 1:
        raise ShapeError("cannot pad an empty sequence")
    if k_t == 1:
        return x
    first = x.narrow(dim, 0, 1)
    reps = [1] * x.ndim
    reps[dim] = k_t - 1
    return torch.cat([first.repeat(*reps), x], dim=dim)


class CausalConv3d(nn.Module):
    """Conv3d with replicated-first-frame temporal padding and symmetric
    spatial padding (k//2). Output length: T' = floor((T-1)/s_t) + 1."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1):
        super().__init__()
        kt, kh, kw = _triple(kernel)
        st, sh, sw = _triple(stride)
        if min(kt, kh, kw) < 1 or min(st, sh, sw) < 1:
            raise ConfigError(f"bad kernel/stride: {kernel}/{stride}")
        self.kt = kt
        self.pad_h = kh // 2
        self.pad_w = kw // 2
        self.conv = nn.Conv3d(in_channels, out_channels, (kt, kh, kw), stride=(st, sh, sw))

    @property
    def in_channels(self) -> int:
        return self.conv.in_channels

    @property
    def out_channels(self) -> int:
        return self.conv.out_channels

    @property
    def spatial_radius(self) -> int:
        return max(self.pad_h, self.pad_w)

    @property
    def spatial_stride(self) -> tuple[int, int]:
        return tuple(self.conv.stride[1:])

    def run_padded(self, x: torch.Tensor, spatial_pad=None) -> torch.Tensor:
        """Forward with explicit (top, bottom, left, right) zero padding;
        None pads symmetrically. Tiled execution passes the residual padding
        left over after the real halo was extracted."""
        if x.ndim != 5:
            raise ShapeError(f"expected [B, C, T, H, W], got shape {tuple(x.shape)}")
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(
                f"expected {self.conv.in_channels} input channels, got {x.shape[1]}"
            )
        if spatial_pad is None:
            spatial_pad = (self.pad_h, self.pad_h, self.pad_w, self.pad_w)
        x = causal_pad(x, self.kt, dim=2)
        top, bottom, left, right = spatial_pad
        if top or bottom or left or right:
            x = F.pad(x, (left, right, top, bottom))
        return self.conv(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run_padded(x)


def _apply_conv(conv: CausalConv3d, x: torch.Tensor, tiler=None) -> torch.Tensor:
    return tiler.run_conv(conv, x) if tiler is not None else conv(x)


def _pick_groups(channels: int, num_groups: int) -> int:
    groups = min(num_groups, channels)
    if channels % groups != 0:
        raise ConfigError(f"{channels} channels not divisible into {groups} groups")
    return groups


class MFGroupNorm(nn.Module):
    """Group normalization without mean subtraction (RMS form).

    y = gamma_c * x / sqrt(mean_group(x^2) + eps); the group statistic is
    taken over (channels-in-group, H, W) for each frame independently.
    """

    def __init__(self, channels, num_groups=8, eps=1e-6):
        super().__init__()
        self.channels = channels
        self.groups = _pick_groups(channels, num_groups)
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != self.channels:
            raise ShapeError(f"expected [B, {self.channels}, T, H, W], got {tuple(x.shape)}")
        b, c, t, h, w = x.shape
        g = x.reshape(b, self.groups, c // self.groups, t, h, w)
        ms = g.square().mean(dim=(2, 4, 5), keepdim=True)
        y = g * torch.rsqrt(ms + self.eps)
        return y.reshape(b, c, t, h, w) * self.gamma.view(1, -1, 1, 1, 1)


class AdaNorm(nn.Module):
    """Mean-free group norm whose scale/shift come from a conditioning tensor.

    The projection starts at zero, so an untouched block is a plain-norm
    pass-through. Conditioning frame j governs input frames
    {r*(j-1)+1, ..., r*j}; frame 0 governs frame 0.
    """

    def __init__(self, channels, cond_channels, num_groups=8, eps=1e-6):
        super().__init__()
        self.norm = MFGroupNorm(channels, num_groups=num_groups, eps=eps)
        self.proj = nn.Conv3d(cond_channels, 2 * channels, kernel_size=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    @staticmethod
    def temporal_ratio(t: int, t_cond: int) -> int:
        if t_cond < 1:
            raise ShapeError("conditioning sequence is empty")
        if t_cond == 1:
            if t != 1:
                raise ShapeError(f"single conditioning frame cannot govern T={t}")
            return 1
        if (t - 1) % (t_cond - 1) != 0:
            raise ShapeError(f"no integer temporal ratio maps {t_cond} cond frames onto T={t}")
        r = (t - 1) // (t_cond - 1)
        if r < 1:
            raise ShapeError(f"conditioning is longer than the input ({t_cond} vs {t})")
        return r

    @staticmethod
    def broadcast_index(t: int, r: int, device=None) -> torch.Tensor:
        idx = torch.arange(t, device=device)
        return (idx + r - 1) // r

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != x.shape[-2:]:
            raise ShapeError(
                f"conditioning spatial dims {tuple(cond.shape[-2:])} != input {tuple(x.shape[-2:])}"
            )
        r = self.temporal_ratio(x.shape[2], cond.shape[2])
        sb = self.proj(cond)
        scale, shift = sb.chunk(2, dim=1)
        idx = self.broadcast_index(x.shape[2], r, device=x.device)
        scale = scale.index_select(2, idx)
        shift = shift.index_select(2, idx)
        return (1.0 + scale) * self.norm(x) + shift


class ResidualUnit(nn.Module):
    def __init__(self, channels, num_groups=8):
        super().__init__()
        self.norm1 = MFGroupNorm(channels, num_groups=num_groups)
        self.conv1 = CausalConv3d(channels, channels, 3)
        self.norm2 = MFGroupNorm(channels, num_groups=num_groups)
        self.conv2 = CausalConv3d(channels, channels, 3)

    def forward(self, x, tiler=None):
        h = _apply_conv(self.conv1, F.silu(self.norm1(x)), tiler)
        h = _apply_conv(self.conv2, F.silu(self.norm2(h)), tiler)
        return x + h


class TemporalDownsampleBlock(nn.Module):
    """Extra 2x temporal compression: strided causal conv plus residual units.

    Maps T = 1 + 2M to 1 + M; spatial dims unchanged.
    """

    def __init__(self, channels, res_units=2, num_groups=8):
        super().__init__()
        self.down = CausalConv3d(channels, channels, 3, stride=(2, 1, 1))
        self.units = nn.ModuleList(
            ResidualUnit(channels, num_groups=num_groups) for _ in range(res_units)
        )

    def forward(self, x):
        if (x.shape[2] - 1) % 2 != 0:
            raise DivisibilityError(f"temporal downsample needs T = 1 + 2M, got T={x.shape[2]}")
        x = self.down(x)
        for unit in self.units:
            x = unit(x)
        return x


class EfficientUpsample(nn.Module):
    """Nearest-duplicate upsample followed by a causal conv.

    Temporally the first conv output frame is dropped (it is the padding
    byproduct), giving T -> 2T - 1 instead of 2T.
    """

    def __init__(self, in_channels, out_channels, temporal=True, spatial=False):
        super().__init__()
        self.temporal = temporal
        self.spatial = spatial
        self.conv = CausalConv3d(in_channels, out_channels, 3)

    def forward(self, x, tiler=None):
        if self.temporal:
            x = x.repeat_interleave(2, dim=2)
        if self.spatial:
            x = x.repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
        x = _apply_conv(self.conv, x, tiler)
        if self.temporal:
            x = x[:, :, 1:]
        return x
