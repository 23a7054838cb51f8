import numpy as np
import pytest
import torch

from progtok.errors import ConfigError, DivisibilityError, ShapeError
from progtok.tokenizer_model import (
    IMAGE_STAGE,
    LatentGrid,
    StagePlan,
    attach_image_encoder,
    build,
    decode,
    encode,
    grow,
    load_checkpoint,
    reconstruct,
    sample_latent,
    save_checkpoint,
)
from progtok.video_data import VideoClip

from conftest import tiny_plan


def random_clip(rng, t=17, c=3, h=16, w=16):
    return VideoClip(frames=rng.uniform(-1, 1, size=(t, c, h, w)).astype(np.float32))


def state_bytes(model):
    return {k: v.numpy().tobytes() for k, v in model.state_dict().items()}


# -------------------------------------------------------------------- plans


def test_plan_validation():
    with pytest.raises(ConfigError):
        StagePlan(k=6)
    with pytest.raises(ConfigError):
        StagePlan(k=4, latent_channels=12)
    with pytest.raises(ConfigError):
        StagePlan(k=4, spatial=8)  # inconsistent with 3 widths
    with pytest.raises(ConfigError):
        StagePlan(k=4, mixing=False)  # mixing toggles growth wiring only
    plan = StagePlan(k=8, mixing=False, widths=(8, 16, 32))
    assert plan.level == 1


def test_plan_roundtrips_through_dict():
    plan = tiny_plan(8, mixing=False)
    assert StagePlan.from_dict(plan.to_dict()) == plan


# -------------------------------------------------------------------- build


def test_build_deterministic():
    a = build(tiny_plan(4), seed=11)
    b = build(tiny_plan(4), seed=11)
    assert state_bytes(a) == state_bytes(b)
    c = build(tiny_plan(4), seed=12)
    assert state_bytes(a) != state_bytes(c)


def test_grown_plan_is_structural_superset():
    names4 = set(build(tiny_plan(4), seed=0).state_dict())
    names8 = set(build(tiny_plan(8), seed=0).state_dict())
    names16 = set(build(tiny_plan(16), seed=0).state_dict())
    assert names4 < names8 < names16
    extra = names8 - names4
    assert any("growth_encoders.0" in n for n in extra)
    assert any("decoder.growth_ups.0" in n for n in extra)
    assert any("bottlenecks.1" in n for n in extra)


def test_no_mixing_plan_has_no_conditioning_parameters():
    model = build(tiny_plan(8, mixing=False), seed=0)
    assert not any("ada" in name for name in model.state_dict())
    mixed = build(tiny_plan(8), seed=0)
    assert any("ada.proj" in name for name in mixed.state_dict())


def test_image_stage_lineage():
    model = build(tiny_plan(4), seed=0)
    image_names = {n for n, lin in model.lineage.items() if lin.stage == IMAGE_STAGE}
    assert image_names == {n for n in model.lineage if n.startswith("image_encoder_2d.")}
    assert all(model.lineage[n].frozen for n in image_names)


# -------------------------------------------------------------- shape laws


@pytest.mark.parametrize("k", [4, 8, 16])
@pytest.mark.parametrize("n", [0, 1, 2])
def test_encode_decode_shape_laws(rng, k, n):
    model = build(tiny_plan(k), seed=0)
    clip = random_clip(rng, t=1 + k * n)
    grid = encode(model, clip)
    assert grid.latent_frames == 1 + n
    assert grid.mean.shape == (1 + n, 8, 4, 4)
    out = decode(model, grid.mean)
    assert out.num_frames == 1 + k * n
    assert out.height == 16 and out.width == 16


def test_encode_rejects_bad_lengths(rng):
    model = build(tiny_plan(4), seed=0)
    with pytest.raises(DivisibilityError):
        encode(model, random_clip(rng, t=16))


def test_decode_rejects_bad_channels(rng):
    model = build(tiny_plan(4), seed=0)
    with pytest.raises(ShapeError):
        model.decode_tensors(torch.randn(1, 5, 2, 4, 4))


def test_reconstruct_roundtrip_properties(rng):
    model = build(tiny_plan(4), seed=0)
    for t in (1, 17, 33):
        clip = random_clip(rng, t=t)
        recon, grid = reconstruct(model, clip)
        assert recon.num_frames == t
        assert np.isfinite(recon.frames).all()
        assert recon.frames.min() >= -1.0 and recon.frames.max() <= 1.0
        again, _ = reconstruct(model, clip)
        assert np.array_equal(recon.frames, again.frames)


# ---------------------------------------------------------------- causality


def test_latent_frame_zero_ignores_later_frames(rng):
    model = build(tiny_plan(4), seed=0)
    clip = random_clip(rng, t=9)
    other = VideoClip(frames=clip.frames.copy())
    other.frames[1:] = rng.uniform(-1, 1, size=other.frames[1:].shape).astype(np.float32)
    a = encode(model, clip)
    b = encode(model, other)
    assert np.array_equal(a.mean[0], b.mean[0])
    assert np.array_equal(a.logvar[0], b.logvar[0])


@pytest.mark.parametrize("k", [4, 8])
def test_causality_per_latent_frame(rng, k):
    model = build(tiny_plan(k), seed=0)
    clip = random_clip(rng, t=1 + 2 * k)
    a = encode(model, clip)
    # perturb frames strictly after k*1; latent frames 0..1 cover inputs <= k
    other = VideoClip(frames=clip.frames.copy())
    other.frames[k + 1:] += 0.25
    other = VideoClip(frames=np.clip(other.frames, -1, 1))
    b = encode(model, other)
    assert np.array_equal(a.mean[:2], b.mean[:2])
    assert not np.array_equal(a.mean[2], b.mean[2])


# ------------------------------------------------------------------ growing


def test_grow_freezes_exactly_the_parent_set():
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8), seed=1)
    frozen = {n for n, lin in m8.lineage.items() if lin.frozen}
    assert frozen == set(m4.state_dict())
    trainable = {n for n, lin in m8.lineage.items() if not lin.frozen}
    assert frozen | trainable == set(m8.state_dict())
    assert not (frozen & trainable)
    for name in frozen:
        assert torch.equal(m8.state_dict()[name], m4.state_dict()[name])


def test_grow_requires_doubling():
    m4 = build(tiny_plan(4), seed=0)
    with pytest.raises(ConfigError):
        grow(m4, tiny_plan(16), seed=1)


def test_key_path_equivalence_after_grow(rng):
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8), seed=1)
    clip = random_clip(rng, t=17)
    x = torch.from_numpy(clip.frames).permute(1, 0, 2, 3).unsqueeze(0)
    with torch.no_grad():
        key = m8.key_features(x)
        trunk = m4.features(x[:, :, ::2], 0)
    assert (key - trunk).abs().max().item() <= 1e-6


def test_grow_without_mixing_adds_no_conditioning(rng):
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8, mixing=False), seed=1)
    new = set(m8.state_dict()) - set(m4.state_dict())
    assert not any("ada" in n for n in new)
    clip = random_clip(rng, t=17)
    assert encode(m8, clip).latent_frames == 3


def test_grow_chain_to_16x(rng):
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8), seed=1)
    m16 = grow(m8, tiny_plan(16), seed=2)
    frozen = {n for n, lin in m16.lineage.items() if lin.frozen}
    assert frozen == set(m8.state_dict())
    clip = random_clip(rng, t=33)
    grid = encode(m16, clip)
    assert grid.latent_frames == 3
    assert decode(m16, grid.mean).num_frames == 33


def test_attach_image_encoder_freezes_only_image_path():
    plan = tiny_plan(4)
    image_model = build(plan, seed=5, with_image_encoder=False, stage_override=IMAGE_STAGE)
    model = build(plan, seed=6)
    attach_image_encoder(model, image_model)
    for name, p in model.named_parameters():
        if name.startswith("image_encoder_2d."):
            assert not p.requires_grad
            src = image_model.state_dict()[name.replace("image_encoder_2d.", "trunk.")]
            assert torch.equal(p, src)
        else:
            assert p.requires_grad


# ----------------------------------------------------------------- sampling


def test_sample_latent_with_floor_logvar_is_mean(rng):
    grid = LatentGrid(
        mean=rng.normal(size=(2, 8, 3, 3)).astype(np.float32),
        logvar=np.full((2, 8, 3, 3), -30.0, dtype=np.float32),
    )
    sample = sample_latent(grid, 2)  # exp(-15) * |eta| stays under 1e-6
    assert np.abs(sample - grid.mean).max() <= 1e-6


def test_sample_latent_reproducible(rng):
    grid = LatentGrid(
        mean=rng.normal(size=(2, 8, 3, 3)).astype(np.float32),
        logvar=rng.uniform(-2, 1, size=(2, 8, 3, 3)).astype(np.float32),
    )
    assert np.array_equal(sample_latent(grid, 42), sample_latent(grid, 42))
    assert not np.array_equal(sample_latent(grid, 42), sample_latent(grid, 43))


def test_sample_latent_statistics():
    # Monte-Carlo oracle: sample mean/var match (mu, sigma^2) within 3 sigma
    mu, logvar = 0.7, -0.4
    grid = LatentGrid(
        mean=np.full((1, 8, 2, 2), mu, dtype=np.float32),
        logvar=np.full((1, 8, 2, 2), logvar, dtype=np.float32),
    )
    gen = torch.Generator().manual_seed(7)
    draws = np.stack([sample_latent(grid, gen) for _ in range(3200)])
    n = draws.size
    sigma = np.exp(logvar / 2)
    assert abs(draws.mean() - mu) < 3 * sigma / np.sqrt(n)
    var = draws.var()
    var_se = sigma ** 2 * np.sqrt(2.0 / (n - 1))
    assert abs(var - sigma ** 2) < 3 * var_se


# -------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8), seed=1)
    path = tmp_path / "m8.ckpt"
    digest = save_checkpoint(m8, path, step=123, parent_hash="abc")
    loaded, meta = load_checkpoint(path)
    assert meta.step == 123 and meta.parent_hash == "abc"
    assert meta.plan == m8.plan
    assert meta.file_hash == digest
    assert state_bytes(loaded) == state_bytes(m8)
    assert loaded.lineage == m8.lineage
    # loaded model can re-grow bit-exactly
    m16a = grow(m8, tiny_plan(16), seed=2)
    m16b = grow(loaded, tiny_plan(16), seed=2)
    assert state_bytes(m16a) == state_bytes(m16b)


def test_checkpoint_rejects_garbage(tmp_path):
    from progtok.errors import FormatError

    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a checkpoint")
    with pytest.raises(FormatError):
        load_checkpoint(junk)


def test_frozen_hash_tracks_frozen_set():
    m4 = build(tiny_plan(4), seed=0)
    m8 = grow(m4, tiny_plan(8), seed=1)
    h0 = m8.frozen_hash()
    with torch.no_grad():
        next(p for p in m8.parameters() if p.requires_grad).add_(1.0)
    assert m8.frozen_hash() == h0  # trainable params do not affect it
    with torch.no_grad():
        next(p for p in m8.parameters() if not p.requires_grad).add_(1.0)
    assert m8.frozen_hash() != h0
