import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progtok.errors import ConfigError, DivisibilityError, FormatError, TruncationError
from progtok.video_data import (
    NVT_MAGIC,
    QUANT_STEP,
    Corpus,
    SynthSpec,
    VideoClip,
    generate_synthetic,
    load_clip,
    plan_chunks,
    save_clip,
    subsample_frames,
)


def random_clip(rng, t=5, c=3, h=8, w=8):
    return VideoClip(frames=rng.uniform(-1, 1, size=(t, c, h, w)).astype(np.float32))


# ----------------------------------------------------------------- storage


def test_header_arithmetic(tmp_path, rng):
    clip = random_clip(rng, t=17, c=3, h=64, w=64)
    path = tmp_path / "c.nvt"
    save_clip(clip, path)
    assert path.stat().st_size == 20 + 17 * 3 * 64 * 64
    loaded = load_clip(path)
    assert loaded.frames.shape == (17, 3, 64, 64)


def test_endpoint_bytes_map_to_unit_interval(tmp_path):
    clip = VideoClip(frames=np.ones((1, 1, 4, 4), dtype=np.float32))
    path = tmp_path / "c.nvt"
    save_clip(clip, path)
    assert load_clip(path).frames.max() == pytest.approx(1.0)
    # raw byte 255 decodes to exactly +1, byte 0 to exactly -1
    raw = bytearray(path.read_bytes())
    raw[20:] = bytes([255, 0] * 8)
    path.write_bytes(bytes(raw))
    vals = load_clip(path).frames.ravel()
    assert vals[0] == 1.0 and vals[1] == -1.0


def test_truncated_payload_rejected(tmp_path, rng):
    path = tmp_path / "c.nvt"
    save_clip(random_clip(rng), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncationError):
        load_clip(path)


def test_bad_magic_rejected(tmp_path, rng):
    path = tmp_path / "c.nvt"
    save_clip(random_clip(rng), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"JUNK"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_clip(path)


def test_zero_clip_quantizes_half_away_from_zero(tmp_path):
    clip = VideoClip(frames=np.zeros((2, 1, 4, 4), dtype=np.float32))
    path = tmp_path / "c.nvt"
    save_clip(clip, path)
    payload = np.frombuffer(path.read_bytes()[20:], dtype=np.uint8)
    assert (payload == 128).all()  # (0+1)*127.5 = 127.5 rounds away from zero
    once = load_clip(path).frames
    assert once == pytest.approx(np.float32(128.0) / np.float32(127.5) - 1.0, abs=1e-7)
    # a second round trip is exact: quantized values are fixed points
    save_clip(load_clip(path), path)
    assert np.array_equal(load_clip(path).frames, once)


def test_roundtrip_error_bounded(tmp_path, rng):
    clip = random_clip(rng, t=7, c=3, h=16, w=16)
    path = tmp_path / "c.nvt"
    save_clip(clip, path)
    err = np.abs(load_clip(path).frames - clip.frames).max()
    assert err <= 1.0 / 127.5


@given(st.integers(min_value=0, max_value=255))
def test_quantization_fixed_point(byte):
    # every stored byte value decodes and re-encodes to itself
    x = np.float32(byte / 127.5 - 1.0)
    again = int(np.floor((x + 1.0) * 127.5 + 0.5))
    assert again == byte


def test_save_to_unwritable_path_raises(tmp_path, rng):
    with pytest.raises(OSError):
        save_clip(random_clip(rng), tmp_path / "missing_dir" / "c.nvt")


def test_clip_validation():
    with pytest.raises(FormatError):
        VideoClip(frames=np.zeros((2, 2, 4, 4), dtype=np.float32))  # 2 channels
    with pytest.raises(FormatError):
        VideoClip(frames=np.full((1, 1, 4, 4), np.nan, dtype=np.float32))
    with pytest.raises(FormatError):
        VideoClip(frames=np.full((1, 1, 4, 4), 3.0, dtype=np.float32))


# -------------------------------------------------------------- subsampling


@pytest.mark.parametrize("t,factor,expected", [(17, 2, 9), (17, 4, 5), (9, 2, 5)])
def test_subsample_lengths(rng, t, factor, expected):
    sub = subsample_frames(random_clip(rng, t=t), factor)
    assert sub.num_frames == expected


def test_subsample_identity(rng):
    clip = random_clip(rng)
    sub = subsample_frames(clip, 1)
    assert np.array_equal(sub.frames, clip.frames)


def test_subsample_keeps_frame_zero_and_stride(rng):
    clip = random_clip(rng, t=9)
    sub = subsample_frames(clip, 2)
    assert np.array_equal(sub.frames, clip.frames[[0, 2, 4, 6, 8]])


def test_subsample_divisibility(rng):
    with pytest.raises(DivisibilityError):
        subsample_frames(random_clip(rng, t=8), 2)


@pytest.mark.parametrize("k", [4, 8, 16])
@pytest.mark.parametrize("n", [0, 1, 2, 3, 4])
def test_halved_clips_stay_stage_valid(rng, k, n):
    # a (1 + 2kN)-frame clip halves into a clip valid for stage k
    clip = random_clip(rng, t=1 + 2 * k * n, c=1, h=4, w=4)
    sub = subsample_frames(clip, 2)
    assert sub.require_stage(k) == n


# ----------------------------------------------------------------- chunking


def _enumerate_spans(total, chunk, overlap):
    # independent oracle: walk starts by stride, clamp the last span
    if total <= chunk:
        return [(0, total)]
    spans, start = [], 0
    while True:
        if start + chunk >= total:
            spans.append((total - chunk, total))
            return spans
        spans.append((start, start + chunk))
        start += chunk - overlap


def test_chunks_68_frames_no_overlap():
    plan = plan_chunks(68, 17, 0)
    assert len(plan.spans) == 4
    assert plan.spans == [(0, 17), (17, 34), (34, 51), (51, 68)]


def test_chunks_30_frames_overlap_4():
    assert plan_chunks(30, 17, 4).spans == [(0, 17), (13, 30)]
    assert plan_chunks(30, 17, 4).spans == _enumerate_spans(30, 17, 4)


def test_single_chunk_when_clip_fits():
    assert plan_chunks(17, 17, 4).spans == [(0, 17)]


def test_overlap_must_be_less_than_chunk():
    with pytest.raises(ConfigError):
        plan_chunks(30, 17, 17)


@given(
    total=st.integers(min_value=1, max_value=400),
    chunk=st.integers(min_value=1, max_value=40),
    overlap=st.integers(min_value=0, max_value=39),
)
@settings(max_examples=100)
def test_chunk_plan_properties(total, chunk, overlap):
    if overlap >= chunk:
        with pytest.raises(ConfigError):
            plan_chunks(total, chunk, overlap)
        return
    plan = plan_chunks(total, chunk, overlap)
    assert plan.spans == _enumerate_spans(total, chunk, overlap)
    # spans cover [0, total) with no gap
    assert plan.spans[0][0] == 0 and plan.spans[-1][1] == total
    for (s0, e0), (s1, e1) in zip(plan.spans, plan.spans[1:]):
        assert s1 <= e0  # no gap
        assert s1 > s0  # strictly advancing
    # interior overlaps equal the requested overlap
    for (s0, e0), (s1, e1) in zip(plan.spans[:-1], plan.spans[1:-1] or []):
        assert e0 - s1 == overlap
    if total > chunk:
        import math

        assert len(plan.spans) == 1 + math.ceil((total - chunk) / (chunk - overlap))


# ---------------------------------------------------------------- synthetic


def test_synthetic_deterministic(tmp_path):
    spec = SynthSpec(num_clips=3, frames_per_clip=5, resolution=16, seed=7)
    a = generate_synthetic(spec, tmp_path / "a")
    b = generate_synthetic(spec, tmp_path / "b")
    for name in a.names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "manifest.txt").read_text() == (tmp_path / "b" / "manifest.txt").read_text()


def test_synthetic_zero_velocity_is_static(tmp_path):
    spec = SynthSpec(num_clips=1, frames_per_clip=6, resolution=16, velocity=(0.0, 0.0), seed=3)
    corpus = generate_synthetic(spec, tmp_path)
    frames = corpus.clip(0).frames
    for t in range(1, frames.shape[0]):
        assert np.array_equal(frames[t], frames[0])


def test_synthetic_17_frames_valid_for_all_stages(tmp_path):
    corpus = generate_synthetic(SynthSpec(num_clips=2, frames_per_clip=17, resolution=16), tmp_path)
    clip = corpus.clip(0)
    for k in (4, 8, 16):
        clip.require_stage(k)


def test_synthetic_rejects_empty_spec(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(SynthSpec(num_clips=0), tmp_path)
    with pytest.raises(ConfigError):
        generate_synthetic(SynthSpec(num_clips=1, frames_per_clip=0), tmp_path)


def test_corpus_open_and_split(tmp_path):
    corpus = generate_synthetic(SynthSpec(num_clips=5, frames_per_clip=3, resolution=16), tmp_path)
    assert len(corpus) == 5
    train, held = corpus.split_holdout(2)
    assert len(train) == 3 and len(held) == 2
    assert held.names == corpus.names[-2:]
    with pytest.raises(ConfigError):
        Corpus.open(tmp_path / "nope")
