"""Reconstruction metrics, latent-budget arithmetic, and evaluation harnesses.

PSNR uses peak 2.0 because pixels live in [-1, 1]; the value is numerically
identical to the [0, 255] convention (the affine map's scale equals the peak
ratio exactly), so reported dB are directly comparable.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivisibilityError, ShapeError
from .tiled_inference import chunked_reconstruct
from .tokenizer_model import TokenizerModel, reconstruct
from .video_data import Corpus, VideoClip, subsample_frames

PSNR_CAP_DB = 99.0


def psnr(x, x_hat, peak: float = 2.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 99 (flag for identical)."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    mse = np.mean((x - x_hat) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))


@dataclass(frozen=True)
class BudgetReport:
    """Latent-frame count for a frame budget at compression k (zero-overlap
    chunking), plus the token ratio against the 4x baseline."""

    frames: int
    k: int
    chunk_length: int
    latents: int
    ratio_vs_4x: float | None

    def describe(self) -> str:
        line = (
            f"{self.frames} frames at {self.k}x compression "
            f"(chunks of {self.chunk_length}): {self.latents} latents"
        )
        if self.ratio_vs_4x is not None:
            line += f" ({self.ratio_vs_4x:g}x fewer tokens than 4x)"
        return line


def latent_budget(frames: int, k: int, chunk_length: int = 17) -> BudgetReport:
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    if (chunk_length - 1) % k != 0:
        raise DivisibilityError(
            f"chunk length {chunk_length} invalid for {k}x compression; need chunk = 1 + k*N"
        )
    if frames % chunk_length != 0:
        raise DivisibilityError(
            f"{frames} frames do not divide into {chunk_length}-frame chunks"
        )
    chunks = frames // chunk_length
    latents = chunks * (1 + (chunk_length - 1) // k)
    ratio = None
    if (chunk_length - 1) % 4 == 0:
        latents_4x = chunks * (1 + (chunk_length - 1) // 4)
        ratio = latents_4x / latents
    return BudgetReport(frames=frames, k=k, chunk_length=chunk_length,
                        latents=latents, ratio_vs_4x=ratio)


@dataclass
class ClipResult:
    clip_path: str
    frames: int
    latents: int
    psnr_db: float
    seconds: float


@dataclass
class EvalReport:
    rows: list[ClipResult] = field(default_factory=list)
    skipped: int = 0
    fingerprint: str = ""
    latent_shape: str = ""

    @property
    def mean_psnr(self) -> float:
        if not self.rows:
            return float("nan")
        return float(np.mean([r.psnr_db for r in self.rows]))

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["clip_path", "frames", "latents", "psnr_db", "seconds"])
        for r in self.rows:
            writer.writerow([r.clip_path, r.frames, r.latents,
                             f"{r.psnr_db:.17g}", f"{r.seconds:.17g}"])
        return buf.getvalue()

    @classmethod
    def from_csv_text(cls, text: str, fingerprint: str = "", skipped: int = 0,
                      latent_shape: str = "") -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header != ["clip_path", "frames", "latents", "psnr_db", "seconds"]:
            raise ShapeError(f"unexpected report header {header}")
        rows = [
            ClipResult(clip_path=row[0], frames=int(row[1]), latents=int(row[2]),
                       psnr_db=float(row[3]), seconds=float(row[4]))
            for row in reader if row
        ]
        return cls(rows=rows, skipped=skipped, fingerprint=fingerprint,
                   latent_shape=latent_shape)

    def summary_text(self) -> str:
        lines = [
            "[report]",
            f"fingerprint = {self.fingerprint}",
            f"clips = {len(self.rows)}",
            f"skipped = {self.skipped}",
            f"latent_shape = {self.latent_shape}",
            f"mean_psnr_db = {self.mean_psnr:.17g}",
            "peak = 2.0  # [-1, 1] pixels; numerically equal to the [0, 255] convention",
        ]
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "eval") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        summary_path = out_dir / f"{stem}.summary.txt"
        csv_path.write_text(self.to_csv_text())
        summary_path.write_text(self.summary_text())
        return csv_path, summary_path


def eval_reconstruction(model: TokenizerModel, corpus: Corpus, *, chunk_length: int = 17,
                        chunk_overlap: int = 4, tile: int | None = None,
                        tile_overlap: int = 8, timing: bool = True,
                        fingerprint: str = "") -> EvalReport:
    """Mean-mode chunked reconstruction over the corpus, in manifest order.

    Clips whose frame counts fit neither whole-clip nor chunked encoding are
    skipped and counted. With `timing` off the seconds column is 0 so the
    report is byte-reproducible.
    """
    if len(corpus) == 0:
        raise ConfigError("cannot evaluate an empty corpus")
    report = EvalReport(fingerprint=fingerprint)
    for i in range(len(corpus)):
        clip = corpus.clip(i)
        t = clip.num_frames
        if t < chunk_length and (t - 1) % model.plan.k != 0:
            report.skipped += 1
            continue
        start = time.perf_counter()
        recon, latents = chunked_reconstruct(
            model, clip, chunk_length=chunk_length, chunk_overlap=chunk_overlap,
            tile=tile, tile_overlap=tile_overlap,
        )
        seconds = time.perf_counter() - start if timing else 0.0
        report.rows.append(ClipResult(
            clip_path=corpus.names[i],
            frames=t,
            latents=latents,
            psnr_db=psnr(clip.frames, recon.frames),
            seconds=seconds,
        ))
        if not report.latent_shape:
            report.latent_shape = (
                f"{latents}x{model.plan.latent_channels}"
                f"x{clip.height // model.plan.spatial}x{clip.width // model.plan.spatial}"
            )
    return report


def eval_subsampled_baseline(model: TokenizerModel, corpus: Corpus, factor: int, *,
                             timing: bool = True, fingerprint: str = "") -> EvalReport:
    """Reconstruct factor-subsampled clips with a lower-compression model and
    score against the subsampled ground truth."""
    if factor not in (1, 2, 4):
        raise ConfigError(f"subsample factor must be 1, 2 or 4, got {factor}")
    if factor == 1:
        return eval_reconstruction(model, corpus, timing=timing, fingerprint=fingerprint)
    if len(corpus) == 0:
        raise ConfigError("cannot evaluate an empty corpus")
    report = EvalReport(fingerprint=f"{fingerprint}:sub{factor}" if fingerprint else f"sub{factor}")
    for i in range(len(corpus)):
        clip = corpus.clip(i)
        if (clip.num_frames - 1) % factor != 0:
            report.skipped += 1
            continue
        sub = subsample_frames(clip, factor)
        if (sub.num_frames - 1) % model.plan.k != 0:
            report.skipped += 1
            continue
        start = time.perf_counter()
        recon, grid = reconstruct(model, sub)
        seconds = time.perf_counter() - start if timing else 0.0
        report.rows.append(ClipResult(
            clip_path=corpus.names[i],
            frames=sub.num_frames,
            latents=grid.latent_frames,
            psnr_db=psnr(sub.frames, recon.frames),
            seconds=seconds,
        ))
        if not report.latent_shape:
            report.latent_shape = "x".join(str(d) for d in grid.mean.shape)
    return report
