"""Bounded-memory decoding: layer-wise spatial tiling with halos and blend
ramps, plus overlapping-chunk stitching for long clips.

Each conv layer's input is split into overlapping spatial tiles. A tile is
extracted with an extra halo of the layer's kernel radius (clamped at tensor
edges, where the layer's own padding applies instead), processed, and the
results blended with linear ramps that form an exact partition of unity.
With a full halo the per-tile outputs agree with the untiled layer up to
float reassociation, so tiling is artifact-free by construction.

Normalization layers are cheap global reductions and are computed on the
full tensor, which keeps their statistics identical to untiled decoding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .tokenizer_model import TokenizerModel, encode
from .video_data import ChunkPlan, VideoClip, _cover_spans, plan_chunks


def _ramp_1d(spans: list[tuple[int, int]], total: int) -> list[np.ndarray]:
    """Per-span 1D blend weights: linear ramps across shared bands, 1 in the
    interior, 0 outside the span."""
    weights = []
    for i, (start, end) in enumerate(spans):
        w = np.zeros(total, dtype=np.float64)
        w[start:end] = 1.0
        if i > 0:
            band = spans[i - 1][1] - start
            if band > 0:
                ramp = (np.arange(band) + 1.0) / (band + 1.0)
                w[start:start + band] = np.minimum(w[start:start + band], ramp)
        if i < len(spans) - 1:
            band = end - spans[i + 1][0]
            if band > 0:
                ramp = (band - np.arange(band)) / (band + 1.0)
                w[end - band:end] = np.minimum(w[end - band:end], ramp)
        weights.append(w)
    return weights


_WEIGHT_GRID = float(1 << 26)


def _exact_partition(maps: np.ndarray) -> np.ndarray:
    """Renormalize so the float sum is exactly 1 at every pixel.

    Weights are snapped to multiples of 2**-26 and the largest weight per
    pixel becomes the exact complement of the rest; sums of such dyadic
    values are exact in float64 under any summation order.
    """
    maps = maps / maps.sum(axis=0)
    q = np.round(maps * _WEIGHT_GRID) / _WEIGHT_GRID
    idx = maps.argmax(axis=0)[None]
    np.put_along_axis(q, idx, 0.0, 0)
    np.put_along_axis(q, idx, 1.0 - q.sum(axis=0), 0)
    return q


@dataclass
class TileLayout:
    """Spatial tiling of an (H, W) plane: rectangles plus blend-weight maps.

    `weights` is [n_tiles, H, W] float64 and sums to exactly 1 at every pixel.
    """

    height: int
    width: int
    tile: int
    overlap: int
    rects: list[tuple[int, int, int, int]]  # (y0, y1, x0, x1), row-major
    weights: np.ndarray = field(repr=False)


def plan_tiles(height: int, width: int, tile: int, overlap: int) -> TileLayout:
    if overlap < 0 or tile <= overlap:
        raise ConfigError(f"need 0 <= overlap < tile, got tile={tile} overlap={overlap}")
    if height < 1 or width < 1:
        raise ConfigError(f"bad plane size {height}x{width}")
    rows = _cover_spans(height, tile, overlap)
    cols = _cover_spans(width, tile, overlap)
    wy = _ramp_1d(rows, height)
    wx = _ramp_1d(cols, width)
    rects = []
    maps = np.zeros((len(rows) * len(cols), height, width), dtype=np.float64)
    for i, (y0, y1) in enumerate(rows):
        for j, (x0, x1) in enumerate(cols):
            rects.append((y0, y1, x0, x1))
            maps[i * len(cols) + j] = np.outer(wy[i], wx[j])
    maps = _exact_partition(maps)
    return TileLayout(height=height, width=width, tile=tile, overlap=overlap,
                      rects=rects, weights=maps)


def layerwise_tiled_apply(layer, x: torch.Tensor, layout: TileLayout, stats=None) -> torch.Tensor:
    """Run a stride-1 conv layer tile by tile and blend the results.

    Requires overlap >= 2 * layer.spatial_radius; per-tile outputs are exact
    on their rectangles, so the blend only reassociates float additions.
    """
    if x.shape[-2:] != (layout.height, layout.width):
        raise ShapeError(
            f"layout is {layout.height}x{layout.width} but tensor is {tuple(x.shape[-2:])}"
        )
    r = layer.spatial_radius
    if stats is not None:
        stats.enter_layer(x, r, len(layout.rects), layout.tile)
    if len(layout.rects) == 1:
        if stats is not None:
            stats.record_tile(x.numel())
        return layer(x)
    if layer.spatial_stride != (1, 1):
        raise ConfigError("layer-wise tiling supports spatially stride-1 layers only")
    if layout.overlap < 2 * r:
        raise ConfigError(
            f"overlap {layout.overlap} < 2*radius {2 * r}: tiled/untiled equivalence not guaranteed"
        )

    h, w = layout.height, layout.width
    ry, rx = layer.pad_h, layer.pad_w
    tile_outs = []
    for (y0, y1, x0, x1) in layout.rects:
        hy0, hy1 = max(0, y0 - ry), min(h, y1 + ry)
        hx0, hx1 = max(0, x0 - rx), min(w, x1 + rx)
        sub = x[..., hy0:hy1, hx0:hx1]
        if stats is not None:
            stats.record_tile(sub.numel())
        # Residual zero padding where the halo hit the tensor boundary; the
        # full-tensor forward pads the same amounts there.
        pad = (ry - (y0 - hy0), ry - (hy1 - y1), rx - (x0 - hx0), rx - (hx1 - x1))
        y = layer.run_padded(sub, spatial_pad=pad)
        if y.shape[-2:] != (y1 - y0, x1 - x0):
            raise ShapeError("tiled output does not match its rectangle")
        tile_outs.append(y)

    # Paste pass gives each pixel a reference value; the weighted correction
    # then realizes sum_i w_i * v_i without perturbing pixels whose tile
    # values agree bitwise.
    out_shape = list(tile_outs[0].shape[:-2]) + [h, w]
    base = x.new_zeros(out_shape)
    for (y0, y1, x0, x1), v in zip(layout.rects, tile_outs):
        base[..., y0:y1, x0:x1] = v
    corr = torch.zeros_like(base)
    for i, ((y0, y1, x0, x1), v) in enumerate(zip(layout.rects, tile_outs)):
        wmap = torch.from_numpy(layout.weights[i, y0:y1, x0:x1]).to(dtype=x.dtype)
        corr[..., y0:y1, x0:x1] += wmap * (v - base[..., y0:y1, x0:x1])
    return base + corr


@dataclass
class TileStats:
    """Per-conv activation accounting for tiled decoding."""

    records: list[dict] = field(default_factory=list)
    _current: dict | None = None

    def enter_layer(self, x: torch.Tensor, radius: int, tiles: int, tile: int) -> None:
        self._current = {
            "input_shape": tuple(x.shape),
            "radius": radius,
            "tiles": tiles,
            "tile": tile,
            "max_tile_elems": 0,
        }
        self.records.append(self._current)

    def record_tile(self, elems: int) -> None:
        if self._current is not None:
            self._current["max_tile_elems"] = max(self._current["max_tile_elems"], elems)

    @property
    def peak_tile_elems(self) -> int:
        return max((rec["max_tile_elems"] for rec in self.records), default=0)


class Tiler:
    """Routes decoder convs through spatial tiles, re-planning the layout as
    the resolution grows; records per-conv tile footprints."""

    def __init__(self, tile: int = 64, overlap: int = 8):
        if overlap < 0 or tile <= overlap:
            raise ConfigError(f"need 0 <= overlap < tile, got tile={tile} overlap={overlap}")
        self.tile = tile
        self.overlap = overlap
        self.stats = TileStats()
        self._layouts: dict[tuple[int, int], TileLayout] = {}

    def layout_for(self, height: int, width: int) -> TileLayout:
        key = (height, width)
        if key not in self._layouts:
            self._layouts[key] = plan_tiles(height, width, self.tile, self.overlap)
        return self._layouts[key]

    def run_conv(self, conv, x: torch.Tensor) -> torch.Tensor:
        layout = self.layout_for(*x.shape[-2:])
        return layerwise_tiled_apply(conv, x, layout, stats=self.stats)


def tiled_decode(model: TokenizerModel, z, tile: int = 64, overlap: int = 8,
                 fps: int = 24, return_stats: bool = False):
    """Decode a latent through the tiled path. `z` is [T_z, C_z, h, w] or a
    LatentGrid; stats report per-conv peak tile footprints when requested."""
    from .tokenizer_model import decode as full_decode

    tiler = Tiler(tile=tile, overlap=overlap)
    clip = full_decode(model, z, fps=fps, tiler=tiler)
    if return_stats:
        return clip, tiler.stats
    return clip


def stitch_chunks(chunks: list[np.ndarray], plan: ChunkPlan) -> np.ndarray:
    """Blend decoded chunks back into one [T, C, H, W] array.

    Across a shared band of m frames the earlier chunk's weight at band
    index i is (m - i) / (m + 1); outside bands frames are copied verbatim.
    Identical chunk content on a band passes through bitwise unchanged.
    """
    if len(chunks) != len(plan.spans):
        raise ShapeError(f"{len(chunks)} chunks for {len(plan.spans)} spans")
    for (start, end), chunk in zip(plan.spans, chunks):
        if chunk.shape[0] != end - start:
            raise ShapeError(
                f"chunk of {chunk.shape[0]} frames does not match span [{start}, {end})"
            )
    tail = chunks[0].shape[1:]
    out = np.empty((plan.total_frames,) + tail, dtype=chunks[0].dtype)
    prev_end = 0
    for (start, end), chunk in zip(plan.spans, chunks):
        band = prev_end - start
        if band < 0:
            raise ShapeError(f"chunk spans leave a gap before frame {start}")
        if band > 0:
            m = band
            for i in range(m):
                w_early = np.asarray((m - i) / (m + 1.0), dtype=out.dtype)
                earlier = out[start + i]
                later = chunk[i]
                out[start + i] = later + w_early * (earlier - later)
        out[prev_end:end] = chunk[band:]
        prev_end = end
    return out


def chunked_reconstruct(model: TokenizerModel, clip: VideoClip, chunk_length: int = 17,
                        chunk_overlap: int = 4, tile: int | None = None,
                        tile_overlap: int = 8) -> tuple[VideoClip, int]:
    """Mean-mode reconstruction via overlapping temporal chunks; returns the
    stitched clip and the total latent-frame count."""
    from .tokenizer_model import decode as full_decode

    plan = plan_chunks(clip.num_frames, chunk_length, chunk_overlap)
    outs, latents = [], 0
    for start, end in plan.spans:
        piece = VideoClip(frames=clip.frames[start:end].copy(), fps=clip.fps)
        grid = encode(model, piece)
        latents += grid.latent_frames
        if tile is not None:
            recon = tiled_decode(model, grid.mean, tile=tile, overlap=tile_overlap, fps=clip.fps)
        else:
            recon = full_decode(model, grid.mean, fps=clip.fps)
        outs.append(recon.frames)
    stitched = stitch_chunks(outs, plan)
    return VideoClip(frames=stitched, fps=clip.fps), latents
