"""Causal video tokenizer with progressively grown temporal compression."""

from .errors import (
    ConfigError,
    DivisibilityError,
    FormatError,
    ShapeError,
    TokenizerError,
    TrainingDiverged,
    TruncationError,
)
from .tokenizer_model import (
    LatentGrid,
    StagePlan,
    TokenizerModel,
    build,
    decode,
    encode,
    grow,
    load_checkpoint,
    reconstruct,
    sample_latent,
    save_checkpoint,
)
from .video_data import ChunkPlan, Corpus, SynthSpec, VideoClip, generate_synthetic, load_clip, plan_chunks, save_clip, subsample_frames

__version__ = "0.1.0"
