"""Clip storage, synthetic corpora, frame subsampling, and temporal chunk planning.

Clips live on disk in the raw NVT format: a 4-byte magic ``NVT1``, four
little-endian uint32 fields (T, C, H, W), then T*C*H*W uint8 pixels in
T-major, C-then-row-major order. A corpus is a directory of ``*.nvt`` files
plus a ``manifest.txt`` listing relative paths, one per line.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivisibilityError, FormatError, TruncationError

NVT_MAGIC = b"NVT1"
_HEADER = struct.Struct("<4sIIII")

#: uint8 quantization step in [-1, 1] pixel units (u = round((x+1)*127.5)).
QUANT_STEP = 1.0 / 127.5

MANIFEST_NAME = "manifest.txt"


@dataclass
class VideoClip:
    """A pixel video: ``frames`` is float32 [T, C, H, W] in [-1, 1].

    ``fps`` is metadata only; it never affects encoding arithmetic.
    """

    frames: np.ndarray
    fps: int = 24

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4:
            raise FormatError(f"clip frames must be [T, C, H, W], got shape {f.shape}")
        if f.shape[0] < 1:
            raise FormatError("clip must contain at least one frame")
        if f.shape[1] not in (1, 3):
            raise FormatError(f"clip channels must be 1 or 3, got {f.shape[1]}")
        if not np.isfinite(f).all():
            raise FormatError("clip contains non-finite pixel values")
        if np.abs(f).max() > 1.0 + 1e-5:
            raise FormatError("clip pixel values outside [-1, 1]")
        self.frames = np.clip(f, -1.0, 1.0)
        if int(self.fps) < 1:
            raise ConfigError(f"fps must be a positive integer, got {self.fps}")
        self.fps = int(self.fps)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]

    def require_stage(self, k: int) -> int:
        """Check T = 1 + k*N and return N."""
        if (self.num_frames - 1) % k != 0:
            raise DivisibilityError(
                f"{self.num_frames} frames invalid for {k}x compression; need T = 1 + {k}*N"
            )
        return (self.num_frames - 1) // k


def save_clip(clip: VideoClip, path) -> None:
    """Write a clip as NVT. Pixels quantize via round-half-away-from-zero."""
    path = Path(path)
    t, c, h, w = clip.frames.shape
    v = (clip.frames + 1.0) * 127.5
    data = np.floor(v + 0.5).clip(0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(NVT_MAGIC, t, c, h, w))
        fh.write(data.tobytes())


def load_clip(path, fps: int = 24) -> VideoClip:
    """Read an NVT file; uint8 pixels map back to [-1, 1] via u/127.5 - 1."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than the NVT header")
    magic, t, c, h, w = _HEADER.unpack_from(raw)
    if magic != NVT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {NVT_MAGIC!r}")
    expected = t * c * h * w
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: header claims {expected} pixel bytes, found {len(payload)}"
        )
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(t, c, h, w)
    frames = pixels.astype(np.float32) / 127.5 - 1.0
    return VideoClip(frames=frames, fps=fps)


def subsample_frames(clip: VideoClip, factor: int) -> VideoClip:
    """Keep frames {0, factor, 2*factor, ...}; frame 0 is always retained."""
    if factor < 1:
        raise ConfigError(f"subsample factor must be >= 1, got {factor}")
    if factor == 1:
        return VideoClip(frames=clip.frames.copy(), fps=clip.fps)
    if (clip.num_frames - 1) % factor != 0:
        raise DivisibilityError(
            f"cannot subsample {clip.num_frames} frames by {factor}; need (T-1) % factor == 0"
        )
    return VideoClip(frames=clip.frames[::factor].copy(), fps=max(1, clip.fps // factor))


def _cover_spans(total: int, size: int, overlap: int) -> list[tuple[int, int]]:
    """Spans of `size` covering [0, total); consecutive spans share `overlap`,
    the final span is clamped to end at `total` (it may share more)."""
    if size <= overlap or overlap < 0:
        raise ConfigError(f"need 0 <= overlap < size, got size={size} overlap={overlap}")
    if total < 1:
        raise ConfigError(f"nothing to cover: total={total}")
    if total <= size:
        return [(0, total)]
    stride = size - overlap
    count = 1 + math.ceil((total - size) / stride)
    spans = []
    for i in range(count):
        start = min(i * stride, total - size)
        spans.append((start, start + size))
    return spans


@dataclass
class ChunkPlan:
    """Temporal chunking: [start, end) frame spans covering the whole clip."""

    total_frames: int
    chunk_length: int
    overlap: int
    spans: list[tuple[int, int]] = field(default_factory=list)


def plan_chunks(total_frames: int, chunk_length: int = 17, overlap: int = 4) -> ChunkPlan:
    spans = _cover_spans(total_frames, chunk_length, overlap)
    return ChunkPlan(
        total_frames=total_frames,
        chunk_length=chunk_length,
        overlap=overlap,
        spans=spans,
    )


@dataclass(frozen=True)
class SynthSpec:
    """Deterministic bouncing-shapes corpus. Same spec + seed => identical bytes."""

    num_clips: int
    frames_per_clip: int = 17
    resolution: int = 64
    shapes: int = 3
    velocity: tuple[float, float] = (0.5, 2.5)
    seed: int = 0
    channels: int = 3
    fps: int = 24

    def validate(self) -> None:
        if self.num_clips < 1:
            raise ConfigError("num_clips must be >= 1")
        if self.frames_per_clip < 1:
            raise ConfigError("frames_per_clip must be >= 1")
        if self.resolution < 8:
            raise ConfigError("resolution must be >= 8")
        if self.shapes < 1:
            raise ConfigError("need at least one shape per clip")
        lo, hi = self.velocity
        if lo < 0 or hi < lo:
            raise ConfigError(f"bad velocity range {self.velocity}")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")


def _reflect(p: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Fold unbounded coordinates into [lo, hi] with mirror bounces."""
    span = hi - lo
    if span <= 0:
        return np.full_like(p, (lo + hi) / 2.0)
    m = np.mod(p - lo, 2.0 * span)
    return lo + np.where(m <= span, m, 2.0 * span - m)


def _render_clip(spec: SynthSpec, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, index])
    t_count, c, res = spec.frames_per_clip, spec.channels, spec.resolution
    bg = rng.uniform(-1.0, -0.7)
    frames = np.full((t_count, c, res, res), bg, dtype=np.float32)
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float32)

    for _ in range(spec.shapes):
        square = bool(rng.integers(0, 2))
        radius = rng.uniform(res / 12.0, res / 5.0)
        color = rng.uniform(-0.2, 1.0, size=c).astype(np.float32)
        lo, hi = radius, res - 1.0 - radius
        cx0 = rng.uniform(min(lo, hi), max(lo, hi))
        cy0 = rng.uniform(min(lo, hi), max(lo, hi))
        speed = rng.uniform(spec.velocity[0], spec.velocity[1])
        ang = rng.uniform(0.0, 2.0 * np.pi)
        vx, vy = speed * np.cos(ang), speed * np.sin(ang)

        ts = np.arange(t_count, dtype=np.float64)
        cx = _reflect(cx0 + vx * ts, lo, hi)
        cy = _reflect(cy0 + vy * ts, lo, hi)
        for t in range(t_count):
            dx, dy = xs - cx[t], ys - cy[t]
            if square:
                dist = np.maximum(np.abs(dx), np.abs(dy))
            else:
                dist = np.sqrt(dx * dx + dy * dy)
            cover = np.clip(radius + 0.5 - dist, 0.0, 1.0).astype(np.float32)
            frames[t] = frames[t] * (1.0 - cover) + color[:, None, None] * cover

    return np.clip(frames, -1.0, 1.0)


def generate_synthetic(spec: SynthSpec, out_dir) -> "Corpus":
    """Render the corpus to `out_dir` and return it opened."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(spec.num_clips - 1)))
    names = []
    for i in range(spec.num_clips):
        name = f"clip_{i:0{width}d}.nvt"
        clip = VideoClip(frames=_render_clip(spec, i), fps=spec.fps)
        save_clip(clip, out_dir / name)
        names.append(name)
    (out_dir / MANIFEST_NAME).write_text("".join(n + "\n" for n in names))
    return Corpus.open(out_dir)


class Corpus:
    """A manifest-ordered collection of NVT clips under one directory."""

    def __init__(self, root: Path, names: list[str], fps: int = 24):
        self.root = Path(root)
        self.names = list(names)
        self.fps = fps

    @classmethod
    def open(cls, root, fps: int = 24) -> "Corpus":
        root = Path(root)
        manifest = root / MANIFEST_NAME
        if not manifest.is_file():
            raise ConfigError(f"{root} is not a corpus (missing {MANIFEST_NAME})")
        names = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
        if not names:
            raise ConfigError(f"{root}: empty corpus manifest")
        return cls(root, names, fps=fps)

    def __len__(self) -> int:
        return len(self.names)

    def clip(self, index: int) -> VideoClip:
        return load_clip(self.root / self.names[index], fps=self.fps)

    def subset(self, indices) -> "Corpus":
        return Corpus(self.root, [self.names[i] for i in indices], fps=self.fps)

    def split_holdout(self, holdout: int) -> tuple["Corpus", "Corpus"]:
        """(train, held-out) split; the held-out set is the manifest tail."""
        if holdout < 0 or holdout >= len(self):
            raise ConfigError(f"holdout {holdout} out of range for {len(self)} clips")
        if holdout == 0:
            return self, Corpus(self.root, [], fps=self.fps)
        return (
            Corpus(self.root, self.names[:-holdout], fps=self.fps),
            Corpus(self.root, self.names[-holdout:], fps=self.fps),
        )
